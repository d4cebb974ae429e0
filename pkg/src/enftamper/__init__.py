"""Audio tamper detection from the phase of the captured mains hum (ENF).

Modules: ``signal_io`` (WAV, decimation, band-pass), ``enf_phase`` (per-frame
DFT0/DFT1 phase), ``features`` (spatial and temporal framing), ``nn`` (numpy
autodiff and layers), ``model`` (classifier, training, persistence),
``synth`` (labelled synthetic corpora) and ``cli``.
"""

__version__ = "0.1.0"
