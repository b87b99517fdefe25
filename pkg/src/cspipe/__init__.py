"""Three-arm matched observational studies of replies to hateful newcomers.

Modules: ``ingest`` (corpus, cohort), ``scorers`` (external services and
stubs), ``labeler`` (ensemble labels and their evaluation), ``represent``
(propensity and PCA representations), ``matcher`` (optimal pair and triplet
matching), ``balance`` (SMD diagnostics), ``estimator`` (GLMM, negative
binomial, treatment effects), ``textadjust`` (use-mention adjustment),
``synth`` (planted-effect generator) and ``cli``.
"""

__version__ = "0.1.0"
