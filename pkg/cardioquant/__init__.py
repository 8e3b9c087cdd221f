"""Spatio-temporal multi-task left-ventricle quantification."""
