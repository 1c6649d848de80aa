import sys

# Configuration file for the Sphinx documentation builder.
#
# For the full list of built-in configuration values, see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Project information -----------------------------------------------------

project = 'drnet-py'
copyright = '2026, DRNet-Py contributors'
author = 'DRNet-Py contributors'
release = '0.1.0'

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.napoleon',
    'sphinx.ext.viewcode',
    'sphinx_design',
    ]

templates_path = ['_templates']
exclude_patterns = []

# matplotlib is an optional extra
autodoc_mock_imports = ['matplotlib']

# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_book_theme'

html_theme_options = {
    "path_to_docs": "doc",

    "use_repository_button": False,
    "use_source_button": False,
    "use_edit_page_button": False,
    "use_download_button": False,
    "use_fullscreen_button": False,

    "logo": {
        "text": "DRNet-Py",
        "alt_text": "DRNet-Py documentation",
    }
}
html_static_path = ["_static"]

# --- Path for autodoc ---
sys.path.append('../../')
