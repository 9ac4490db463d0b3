"""3D minutiae graph matching toolkit."""
