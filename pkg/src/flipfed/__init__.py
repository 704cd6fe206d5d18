"""Simulation of focused-flip federated backdoor attacks and the defenses they target.

Modules:
    nncore      small float64 conv/dense network with manual backprop
    datagen     synthetic image blobs, Dirichlet client partitions, triggers
    federation  FedAvg rounds, client sampling, ACC/ASR evaluation
    attack      importance scoring, focused flips, trigger optimisation
    robustagg   Bulyan, robust learning rate, DeepSight
    refinecert  FedDF, FedRAD, FedMV pruning, CRFL smoothing
    experiment  seeded runner, metrics CSV, ablation and sweep suites
"""

__version__ = "0.1.0"
