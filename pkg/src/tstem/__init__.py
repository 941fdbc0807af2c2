"""TSTEM-style streaming OSINT pipeline: crawl, classify, extract, index."""

__version__ = "0.1.0"
