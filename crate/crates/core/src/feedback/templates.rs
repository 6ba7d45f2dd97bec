//! Prompt templates for sampling the round-two candidate pool. Each `{}` is
//! filled with a style phrase such as "in watercolor painting style".

use crate::data::{Catalog, Shape};
use crate::error::{Error, Result};
use crate::text::{build_prompt, PromptSpec};

/// The photographic prompt list used for the second training round.
pub const PHOTO_TEMPLATES: [&str; 30] = [
    "A chihuahua {}",
    "A chihuahua walking on the street {}",
    "A chihuahua walking in the forest {}",
    "A tabby cat {}",
    "A tabby cat walking on the street {}",
    "A tabby cat walking in the forest {}",
    "A portrait of chihuahua {}",
    "A portrait of tabby cat {}",
    "A portrait of human face {}",
    "An apple on the table {}",
    "An apple on the dish {}",
    "An apple on the ground {}",
    "A banana on the table {}",
    "A banana on the dish {}",
    "A banana on the ground {}",
    "A human {}",
    "A human walking on the street {}",
    "A human walking in the forest {}",
    "A church on the street {}",
    "A temple on the street {}",
    "A cabin on the street {}",
    "A church in the mountain {}",
    "A temple in the mountain {}",
    "A cabin in the mountain {}",
    "A church in the field {}",
    "A temple in the field {}",
    "A cabin in the field {}",
    "A church on the beach {}",
    "A temple on the beach {}",
    "A cabin on the beach {}",
];

/// Phrasings for the synthetic shapes; `{c}` is the shape word.
pub const SHAPE_PHRASINGS: [&str; 5] = [
    "A {c} {}",
    "A {c} on the canvas {}",
    "A {c} in the center {}",
    "A small {c} {}",
    "A bold {c} {}",
];

/// Every phrasing for every shape of the catalog, phrasing-major.
pub fn shape_templates(cat: &Catalog) -> Vec<String> {
    SHAPE_PHRASINGS
        .iter()
        .flat_map(|p| {
            cat.contents
                .iter()
                .map(move |c| p.replace("{c}", c.shape.word()))
        })
        .collect()
}

/// The reduced default list: the first two phrasings over every shape the
/// base model was pretrained on (10 templates for the default catalog).
pub fn default_templates(cat: &Catalog) -> Vec<String> {
    SHAPE_PHRASINGS[..2]
        .iter()
        .flat_map(|p| {
            cat.contents
                .iter()
                .filter(|c| c.content_id != cat.held_out_content)
                .map(move |c| p.replace("{c}", c.shape.word()))
        })
        .collect()
}

/// Content phrasing used for a pretraining or reference example.
pub fn shape_content(shape: Shape, phrasing: usize) -> String {
    let p = SHAPE_PHRASINGS[phrasing % SHAPE_PHRASINGS.len()];
    p.replace("{c}", shape.word()).replace(" {}", "")
}

/// Prompt paired with a catalog image: the phrasing cycles with the seed.
pub fn example_prompt(
    cat: &Catalog,
    style_id: usize,
    content_id: usize,
    seed: u64,
) -> Result<PromptSpec> {
    let content = shape_content(
        cat.content(content_id).shape,
        (seed % SHAPE_PHRASINGS.len() as u64) as usize,
    );
    build_prompt(&content, Some(&cat.style(style_id).descriptor))
}

/// Fills a template's `{}` with `in <descriptor> style`. The result renders
/// exactly as plain string substitution would.
pub fn fill_template(template: &str, descriptor: &str) -> Result<PromptSpec> {
    let content = template.strip_suffix(" {}").ok_or_else(|| {
        Error::InvalidArgument(format!("template {template:?} must end in \" {{}}\""))
    })?;
    build_prompt(content, Some(descriptor))
}

/// Which template a shape-template prompt refers to, if any.
pub fn template_shape(cat: &Catalog, prompt: &PromptSpec) -> Option<usize> {
    cat.contents
        .iter()
        .find(|c| {
            prompt
                .content_text
                .iter()
                .any(|w| w.eq_ignore_ascii_case(c.shape.word()))
        })
        .map(|c| c.content_id)
}
