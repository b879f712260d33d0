"""relfeat: joint keypoint detector/descriptor with repeatability and
reliability maps, trained self-supervised on synthetic homography pairs.

Ships its own numpy-backed reverse-mode autodiff engine, the three-headed
fully-convolutional network, the repeatability and AP-based reliability
losses, multi-scale extraction, and the matching/evaluation metric suite.
"""

__version__ = "0.1.0"
