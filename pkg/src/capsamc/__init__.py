"""Capsule-network classifier for digital modulation schemes from raw I/Q.

Modules
-------
nncore      numpy layers with forward and reverse passes, loss, SGDM
capsnet     network assembly, inference and checkpoints
modsig      synthetic labelled I/Q frames and a demodulation oracle
dataio      on-disk datasets, splits and merges
trainer     training loop with validation-based model selection
evaluation  confusion matrices, accuracy-vs-SNR and dataset-shift runs
cli         command-line front end
"""

__version__ = "0.1.0"
