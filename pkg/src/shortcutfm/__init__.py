"""Shortcut-conditioned flow matching for complex-spectrogram denoising.

Modules: ``spectro`` (signals, STFT, chunking, files), ``net`` (velocity
network, Adam, checkpoints), ``flow`` (paths, losses, training), ``priors``
(endpoint priors G/S/D/F), ``sampler`` (K-step ODE, Euler-Maruyama),
``oracle`` (closed-form references), ``metrics`` (SI-SDR, reports) and
``cli``.
"""

__version__ = "0.1.0"
