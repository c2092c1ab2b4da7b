"""Anti-GAN defense experimentation framework."""
