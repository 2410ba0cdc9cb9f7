# Utility helpers for ConvNova
