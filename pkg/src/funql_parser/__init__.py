"""Transition-based semantic parsing into FunQL with knowledge-base grounding."""

from .funql import LogicalForm, Term, TermKind, is_isomorphic, parse_funql, print_funql, substitute_terms
from .kb import Denotation, KnowledgeBase, execute, load_kb, surrogate_search

__version__ = "0.1.0"

__all__ = [
    "Denotation",
    "KnowledgeBase",
    "LogicalForm",
    "Term",
    "TermKind",
    "execute",
    "is_isomorphic",
    "load_kb",
    "parse_funql",
    "print_funql",
    "substitute_terms",
    "surrogate_search",
]
