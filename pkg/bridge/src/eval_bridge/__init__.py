"""Reference external evaluator speaking the loramerge wire protocol.

The bridge reads an exported testbed (testbed.json plus safetensors files)
and answers newline-delimited JSON evaluation requests on stdin with one
response per line on stdout.  It shares no code with loramerge, so numerical
agreement between the two is a genuine cross-implementation check, and it is
the template to adapt when wrapping a real model-evaluation stack.
"""

from .model import Testbed, TestbedError, load_delta, load_testbed, per_task_accuracy
from .server import BridgeConfig, handle_request, serve
from .tensorfile import TensorFormatError, read_tensors

__version__ = "0.1.0"

__all__ = [
    "BridgeConfig",
    "TensorFormatError",
    "Testbed",
    "TestbedError",
    "handle_request",
    "load_delta",
    "load_testbed",
    "per_task_accuracy",
    "read_tensors",
    "serve",
]
