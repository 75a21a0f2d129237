"""ModGNN: a modular decentralized GNN framework and a flocking
imitation-learning harness."""

__version__ = "0.1.0"
