import os
import sys

# flat module layout: make the repo root importable for tests/
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
