"""Structured-light + hyperspectral probe pipeline, validated on a synthetic rig.

Modules:
    geometry   - pinhole models, epipolar geometry, triangulation
    simulator  - synthetic scenes, frames and ground truth
    spotdetect - FCN spot scorer, training, local-maxima extraction
    spotmatch  - descriptor matching with Delaunay propagation
    spectra    - hyperspectral chain through StO2 fitting
    hybrid     - fusion, export, timing
    pipeline   - end-to-end orchestration helpers
    cli        - command-line interface
"""

__version__ = "0.1.0"
