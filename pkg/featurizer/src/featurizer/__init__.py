"""Frozen ViT adapter: patch images in, token bag files out.

Emits the classifier's on-disk contract (bag files plus manifest JSON)
without importing it; `raamil validate` is the cross-package check.
"""

from featurizer.adapter import FeaturizeError, FeaturizeJob, extract_tokens
from featurizer.bagfile import write_tokens

__version__ = "0.1.0"
