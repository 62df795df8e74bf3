"""Court view generation with knowledge-injected prefix tuning and a
classifier-guided decoding navigator, on a synthetic civil-case corpus."""

__version__ = "0.1.0"
