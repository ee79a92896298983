"""Topic-guided caption generation at desk scale.

Mines latent topics from paired (feature-vector, sentence-set) records with
weighted kernel k-means, trains a student topic predictor against the mined
teacher distributions, and decodes sentences with a topic-factorized LSTM
trained under a multi-task loss.
"""

__version__ = "0.1.0"
