import pathlib
import sys

# run against the working tree when the package is not installed
sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent))
