"""Tests for the SAHMM-VAE package."""
