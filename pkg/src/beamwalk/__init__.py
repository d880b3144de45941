"""Beamspace channel estimation for lens-array mmWave MIMO.

Modules:

* :mod:`beamwalk.tensor`       small reverse-mode autodiff engine on numpy
* :mod:`beamwalk.channel`      Saleh-Valenzuela channels and the lens codebook
* :mod:`beamwalk.measurement`  selection matrices, pilots and dataset files
* :mod:`beamwalk.solvers`      ISTA, AMP and least squares
* :mod:`beamwalk.tpgd`         the unrolled proximal-gradient network
* :mod:`beamwalk.train`        training, evaluation and experiment recipes
* :mod:`beamwalk.config`, :mod:`beamwalk.cli`  configuration and command line
"""

__version__ = "0.1.0"
