"""Span-level phenotyping toolkit for diabetic eye disease notes.

Pipeline pieces: a concept/attribute ontology with task consolidation,
note rendering and a synthetic corpus generator, high-recall concept
extraction (free text + ICD-10 codes), context windowing, patient-grouped
stratified cross validation, a conditioned majority baseline, a small
trainable text encoder with masked-token pretraining, span classifiers,
evaluation statistics, and annotation workbooks.
"""

__version__ = "0.1.0"
