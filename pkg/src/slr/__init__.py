"""Transfer-learning and mobile-style inference toolkit for Sign Language MNIST."""

__version__ = "0.1.0"
