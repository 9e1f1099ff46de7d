"""Adversarial simplicial-complex attack on a desk-scale image encoder.

Modules:
    numerics: seeded sampling, determinants and kernel MMD.
    geometry: simplices, Cayley-Menger volume and barycentric sampling.
    encoder: small vision-transformer encoder with analytic gradients.
    attack: vertex initialisation, patch augmentation and refinement.
    harness: transfer evaluation and ablation reports.
    cli: command-line entry point.
"""

__version__ = "0.1.0"
