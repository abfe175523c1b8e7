"""
Domain modules: diffusion core, quantizers, time cache, latent datasets,
quantization-aware training, stability tracking and metrics.
"""
