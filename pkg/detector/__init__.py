"""Stealthy-FDIA detectors: the transfer-trained network, baselines and evaluation."""
