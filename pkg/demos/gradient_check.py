"""
Checking the hand-written gradients
===================================

The training loss is differentiated by the package's own tape. A separate
numpy evaluation of the same loss, probed by finite differences, keeps it
honest.
"""

from nafs import pipeline

report = pipeline.gradcheck(seeds=range(3))
print("\n".join(report.lines()))

# The negative control: a perturbed gradient must be caught.
broken = pipeline.gradcheck(seeds=range(1), fault=True)
print("fault injection detected:", not broken.passed)
