"""Model locking for transformer FFN blocks: outlier-guided key embedding,
orthogonal obfuscation, a Benes permutation fabric, a systolic-array
simulator and key-recovery attacks."""

__version__ = "0.1.0"
