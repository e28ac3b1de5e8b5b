"""Blind source separation with HMM-structured VAE priors."""
