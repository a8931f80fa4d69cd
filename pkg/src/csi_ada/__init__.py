"""WiFi CSI fall detection with adversarial data augmentation for domain shift.

Modules: :mod:`csi_ingest` (CSI parsing and preprocessing), :mod:`synth`
(synthetic domains), :mod:`diff_core` (reverse-mode tensors), :mod:`models`
(CNN and LSTM), :mod:`ada` (augmentation training), :mod:`lodo` and
:mod:`experiment` (leave-one-domain-out evaluation), :mod:`cli`.
"""

__version__ = "0.1.0"
