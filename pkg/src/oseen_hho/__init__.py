"""Hybrid High-Order discretization of the steady Oseen equations on polygonal meshes."""
