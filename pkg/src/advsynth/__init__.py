"""Adversarial scenario synthesis for a perception / planning / MPC stack.

Library layout:

* :mod:`advsynth.tensor`    reverse-mode autodiff core + checkpoint I/O
* :mod:`advsynth.nn`        layer initializers and the Adam optimizer
* :mod:`advsynth.mpc`       tracking QP builders, ADMM solver, cost gradients
* :mod:`advsynth.scene`     scenario sampling, analytic renderer, label planner
* :mod:`advsynth.vae`       sigma-VAE encoder/decoder and trainer
* :mod:`advsynth.taskmodel` perception + waypoint planner network
* :mod:`advsynth.adversary` latent-space ascent that mines hard scenes
* :mod:`advsynth.evalbench` augmentation, Wilcoxon test, benchmark protocol
* :mod:`advsynth.dataio`    binary dataset container
* :mod:`advsynth.cli`       command-line front end
"""

__version__ = "0.1.0"
