from .arrayio import decode_array, encode_array, read_array, write_array
from .dataset import Normalizer, NormalizedSample, list_samples, load_dataset, load_sample, normalize_fit_apply, save_sample
from .stl import TriangleMesh, mesh_to_pointcloud, parse_stl, read_stl, write_stl
from .synthetic import generate_dataset, generate_sphere_flow, random_sphere_flow
from .types import SURFACE, VOLUME, FieldSample, FlowConstants, PointCloud, QuerySet
