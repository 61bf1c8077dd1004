"""Clustering of longitudinal trajectories.

Modules
-------
core       data model, CSV ingestion, alignment, partition comparison
synthgen   synthetic PAP-adherence data
crosssec   longitudinal k-means (KML) and latent profile analysis (LLPA)
distance   pairwise distances, hierarchical clustering, k-medoids, silhouettes
features   per-subject regression features and feature-based clustering
mixture    group-based trajectory models and growth mixture models
selection  BIC, entropy, elbow and cluster-count sweeps
cli        command-line front end
"""

__version__ = "0.1.0"
