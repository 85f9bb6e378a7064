"""One-step feed-forward monocular depth estimation built on a toy image diffusion model.

The package turns a small pretrained pixel-space denoiser into a deterministic
single-pass depth predictor: the denoiser evaluated at t=0 maps an image latent
directly to a depth latent, and an extra t=-1 step refines it against coarse
teacher pseudo-labels. Training blends image and depth latents to keep the
diffusion trajectory intact while supervised depth losses pull the t=0 output
toward ground truth.
"""

__version__ = "0.1.0"
