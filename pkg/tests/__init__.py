"""Tests for the InSeGAN instance segmentation package."""
