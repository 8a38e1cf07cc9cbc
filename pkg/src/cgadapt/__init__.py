"""Unsupervised feature-domain adaptation for speaker verification with a CycleGAN.

Subpackages and modules:

- ``autodiff``: small reverse-mode autodiff over numpy (conv, transposed conv, instance norm)
- ``models``: generator / discriminator definitions and checkpoints
- ``training``: losses, Adam, learning-rate schedule, training loop
- ``dsp``: audio I/O, log-mel features, VAD, CMN, augmentation, blind SNR
- ``backend``: stats-pooling embeddings, LDA, PLDA, S-norm
- ``metrics``: EER, minDCF
- ``cli``: staged command-line pipeline; ``toy`` / ``pipeline``: synthetic experiment
"""

__version__ = "0.1.0"
