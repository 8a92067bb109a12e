"""
mixquant: quantization toolkit for MLP-Mixer, ResMLP and ConvMixer models
"""

__version__ = "0.3.0"
