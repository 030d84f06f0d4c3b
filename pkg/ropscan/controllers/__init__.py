from . import run_controller

__all__ = ["run_controller"]
