"""Unsupervised pose-based detection of repetitive (stereotypical) behaviour in video.

Three proxy streams score every frame of a keypoint sequence: a sequence
autoencoder (pose reconstruction), a one-step forecaster (pose prediction) and
a self-similarity repetition classifier. Their scores are z-normalized with
training statistics and fused linearly.
"""

__version__ = "0.1.0"
