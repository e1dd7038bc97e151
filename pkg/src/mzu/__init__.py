"""Multi-zone recurrent cells and a character-level language-modeling harness.

The transition function of each cell projects its inputs into several
zones, lets the zones interact through one of three composition
backends (scaled dot-product attention, graph convolution over a
cosine-similarity graph, or capsule dynamic routing), and aggregates
them back into the hidden state. A disagreement regularizer pushes the
zones apart during training.
"""

__version__ = "0.1.0"
