use crate::backbone::Image;
use crate::tensor::Tensor;

/// A labelled image, optionally with pixel masks of its class-discriminative
/// glyph and of the region shared by all classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Image,
    pub label: usize,
    pub glyph_mask: Option<Tensor>,
    pub mutual_mask: Option<Tensor>,
}

impl Example {
    pub fn new(image: Image, label: usize) -> Self {
        Example {
            image,
            label,
            glyph_mask: None,
            mutual_mask: None,
        }
    }
}
