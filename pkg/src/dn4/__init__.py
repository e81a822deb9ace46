"""Few-shot image classification with local descriptors and a k-NN
image-to-class measure, built on a minimal tape-based autodiff core.

Import is deliberately lazy: submodules pull in numpy, so the command-line
front end can pin threading environment variables first.
"""

__version__ = "0.1.0"
