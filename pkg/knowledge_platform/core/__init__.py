"""
Core knowledge graph analytics modules
"""

from .graph import KnowledgeGraph, Triplet, graph_loader, load_graph, sparsify
from .tables import EntityScoreTable, TripletLabelTable
from .oracle import LLMLabeler, OracleConfig, TemplateTable, probe_batch, verbalize
from .planted import PlantedOracle, PlantedOracleConfig, generate_synthetic
from .homophily import degree_matched_baseline, entity_knowledgeability, node_homophily
from .estimator import RegressorKind, TrainConfig, predict, train
from .injection import Budget, plan_selection, sample_anchors
from .retrieval import RetrievalConfig, beam_search, generate_questions

__all__ = [
    'KnowledgeGraph',
    'Triplet',
    'graph_loader',
    'load_graph',
    'sparsify',
    'EntityScoreTable',
    'TripletLabelTable',
    'LLMLabeler',
    'OracleConfig',
    'TemplateTable',
    'probe_batch',
    'verbalize',
    'PlantedOracle',
    'PlantedOracleConfig',
    'generate_synthetic',
    'degree_matched_baseline',
    'entity_knowledgeability',
    'node_homophily',
    'RegressorKind',
    'TrainConfig',
    'predict',
    'train',
    'Budget',
    'plan_selection',
    'sample_anchors',
    'RetrievalConfig',
    'beam_search',
    'generate_questions',
]
