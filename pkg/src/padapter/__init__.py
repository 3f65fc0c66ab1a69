"""Two-stage adapter-based diffusion inpainting at desk scale.

A small trainable denoiser hosts two attention adapters: a dual-context
adapter learned at base resolution (stage 1) and a reference-patch adapter
for patch-tiled native-resolution refinement (stage 2), wired into a
blended-diffusion sampling pipeline with hierarchical prompts, a synthetic
texture benchmark and a proxy-metric evaluation harness.
"""

__version__ = "0.1.0"
