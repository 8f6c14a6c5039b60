from .app import app, create_app
from . import schemas

__all__ = ["app", "create_app", "schemas"]
