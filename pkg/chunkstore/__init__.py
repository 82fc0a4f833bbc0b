# This file makes the 'chunkstore' directory a Python package.
