from .clinical import (
    DEFAULT_SCHEMA,
    Attribute,
    ClinicalEncoder,
    ClinicalSchema,
    ClinicalStats,
    encode_clinical_dummy,
    encode_clinical_vector,
)
from .pooling import (
    AttentionPool,
    AttentionPoolingEncoder,
    PackedBags,
    PooledCoxModel,
    pack_bags,
    pathology_pool,
    radiology_pool,
)
