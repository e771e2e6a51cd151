"""Perpetual scene-view generation with concept-graph customization.

Subpackage map: ``graph`` (scene concept graph), ``diffusion`` (toy denoiser,
schedule, sampler), ``training`` (two-phase customization + test-time
refinement), ``outpaint`` (blended-latent outpainting), ``geometry``
(cameras, point clouds, rendering), ``pipeline`` (sessions and the
generate/refine loop), ``metrics`` (scene fidelity), ``backends`` (toy
depth/segmentation/embedding), ``service`` (HTTP API), ``cli``.
"""

__version__ = "0.1.0"
