"""Collaborative differentially-private training at desk scale.

Subpackages/modules:
  models     - minimal MLP with per-example backprop and a finite-difference oracle
  data       - IDX loading and synthetic blob datasets
  privacy    - clipping, DP mask splitting, dynamic clip bounds, noise correction
  accounting - tight Gaussian-mechanism (epsilon, delta) accounting and calibration
  protocol   - sealed assets, key distribution, message envelopes, the session loop
  cli        - command-line front end
"""

__version__ = "0.1.0"
