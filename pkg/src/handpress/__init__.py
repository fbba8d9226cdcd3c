"""Hand pose and contact-pressure estimation toolkit for a wrist-worn fisheye camera."""

__version__ = "0.1.0"
