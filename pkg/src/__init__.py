# ConvNova - gated dilated convolutions for DNA sequence modeling
__version__ = "1.0.0"
