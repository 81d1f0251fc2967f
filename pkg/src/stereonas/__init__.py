"""Architecture search and hyperparameter optimization for stereo disparity.

Two optimization engines over one numerical core:

* differentiable cell-based architecture search extended to
  encoder-decoder networks (``cellspace``, ``netbuilder``, ``bilevel``),
* multi-fidelity hyperparameter optimization with model-based sampling
  (``bohb``) plus functional-ANOVA importance analysis (``fanova``).

Both are exercised end to end on a synthetic stereo disparity task
(``stereodata``).  The autodiff engine lives in ``tensor``.
"""

__version__ = "0.1.0"
