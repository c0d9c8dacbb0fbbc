"""Desk-scale human-centered image geolocation.

Modules: ``tensor`` (ops with backward passes), ``convnet`` (networks and
fine-tuning), ``dataset`` (manifests, splits, synthetic corpus),
``classifiers`` (SVM, k-NN retrieval), ``inspection`` (filter attribution),
``evaluation`` (mean class accuracy) and ``cli``.
"""

__version__ = "0.1.0"
