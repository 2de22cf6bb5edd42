"""Class-imbalance-aware image classification toolkit.

Stratified splitting, leveled standard augmentation, intensive augmentation of
below-mean classes, cost-sensitive training of a small convolutional
classifier, binary-to-multi-class transfer staging and classification reports.
"""

__version__ = "0.1.0"
