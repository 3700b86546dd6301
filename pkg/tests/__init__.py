"""Tests for the PBE-UNet segmentation engine."""
