import importlib.metadata

# Configuration file for the Sphinx documentation builder.
#
# For the full list of built-in configuration values, see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Project information -----------------------------------------------------

project = "poolselect"
copyright = "2026, poolselect Contributors"
author = "poolselect Contributors"
release = importlib.metadata.version("poolselect")

# -- General configuration ---------------------------------------------------

extensions = ["sphinx.ext.autodoc", "sphinx_issues"]

templates_path = ["_templates"]
exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]

# -- Options for HTML output -------------------------------------------------

html_theme = "furo"
html_static_path = ["_static"]
html_title = "poolselect"
