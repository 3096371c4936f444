"""Geodesic clustering in the latent space of a variational autoencoder."""
from .clustering import cluster_accuracy, euclidean_latent_matrix, kmedoids, spectral_cluster
from .geodesic import (DistanceMatrix, GeneratorModel, GeodesicConfig, QuadraticCurve,
                       geodesic_distance, pairwise_distances)
from .latentgmm import PrecisionGmm, em_fit, fit_Wg
from .vae import VaeArchitecture, VaeModel, TrainConfig, train_stage1

__version__ = "0.1.0"
