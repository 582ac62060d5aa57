"""Non-Gaussian Matérn fields through SPDEs driven by type G noise."""
