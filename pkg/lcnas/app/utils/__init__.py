# Genotype validation, reproducibility and logging helpers
