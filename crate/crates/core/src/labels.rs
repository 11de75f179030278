//! Label vocabulary shared by sample lists, error matrices and model outputs.
//!
//! Land-cover classes are indexed in the order of [`LAND_COVER_CLASSES`];
//! model logit plane `k` corresponds to class `k`. Accuracy assessment uses
//! the binary pair [`TREE_CROP`] / [`NON_TREE_CROP`]. [`UNKNOWN`] marks a
//! missing reference label.

pub const TREE_CROP: &str = "tree_crop";
pub const NON_TREE_CROP: &str = "non_tree_crop";
pub const UNKNOWN: &str = "unknown";

pub const LAND_COVER_CLASSES: [&str; 8] = [
    TREE_CROP,
    "natural_forest",
    "planted_forest",
    "other_vegetation",
    "built",
    "water",
    "ice_snow",
    "bare",
];

/// Index of the tree-crop class among [`LAND_COVER_CLASSES`].
pub const TREE_CROP_INDEX: usize = 0;

pub fn is_known_label(label: &str) -> bool {
    label == NON_TREE_CROP || LAND_COVER_CLASSES.contains(&label)
}

/// Collapses a land-cover label onto the binary tree-crop vocabulary.
pub fn to_binary(label: &str) -> &'static str {
    if label == TREE_CROP {
        TREE_CROP
    } else {
        NON_TREE_CROP
    }
}
