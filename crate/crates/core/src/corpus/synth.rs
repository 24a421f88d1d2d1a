//! Templated synthetic product corpus.
//!
//! Every product gets a type, a templated title + description, and 3 to 6
//! distinct questions. Each question is drawn from the product-independent
//! "general" pool with probability `general_share`, otherwise from its
//! type's "specific" pool, so a small set of general questions dominates the
//! corpus while the specific ones are spread thinly across products.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProductRecord;
use crate::error::{Error, Result};

pub const MIN_QUESTIONS: usize = 3;
pub const MAX_QUESTIONS: usize = 6;

/// Slot vocabulary and question templates of one product type.
///
/// Templates may use `{noun}`, `{material}`, `{feature}`, `{brand}` and
/// `{color}`; the same values are used in the product's context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductTypeSpec {
    pub name: String,
    pub nouns: Vec<String>,
    pub materials: Vec<String>,
    pub features: Vec<String>,
    pub uses: Vec<String>,
    pub specific: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateLibrary {
    pub general: Vec<String>,
    pub types: Vec<ProductTypeSpec>,
    pub brands: Vec<String>,
    pub colors: Vec<String>,
    /// Probability that a drawn question comes from the general pool.
    pub general_share: f64,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for TemplateLibrary {
    fn default() -> Self {
        let ty = |name: &str, nouns: &[&str], materials: &[&str], features: &[&str], uses: &[&str], specific: &[&str]| {
            ProductTypeSpec {
                name: name.into(),
                nouns: strings(nouns),
                materials: strings(materials),
                features: strings(features),
                uses: strings(uses),
                specific: strings(specific),
            }
        };
        TemplateLibrary {
            general: strings(&[
                "what are the dimensions?",
                "does it come with a warranty?",
                "how much does it weigh?",
                "where is it made?",
                "what colors does it come in?",
                "is it worth the price?",
            ]),
            types: vec![
                ty(
                    "kitchen",
                    &["skillet", "saucepan", "kettle", "blender"],
                    &["steel", "aluminum", "copper", "ceramic"],
                    &["nonstick coating", "glass lid", "cool handle"],
                    &["daily cooking", "family meals", "quick breakfasts"],
                    &[
                        "is the {material} {noun} dishwasher safe?",
                        "can the {noun} go in the oven?",
                        "does the {noun} work on an induction stove?",
                        "is the {feature} safe for food?",
                        "does the {brand} {noun} come with a lid?",
                        "will the {material} stain over time?",
                    ],
                ),
                ty(
                    "office",
                    &["stapler", "desk", "organizer", "chair"],
                    &["plastic", "oak", "metal", "mesh"],
                    &["adjustable height", "locking drawer", "padded armrests"],
                    &["home offices", "classrooms", "busy desks"],
                    &[
                        "how many sheets can the {noun} handle?",
                        "is the {noun} easy to assemble?",
                        "does the {feature} lock in place?",
                        "is the {material} sturdy enough for daily use?",
                        "does the {brand} {noun} need tools?",
                        "can the {noun} hold a laptop?",
                    ],
                ),
                ty(
                    "sports",
                    &["tent", "backpack", "bike", "racket"],
                    &["nylon", "carbon", "canvas", "graphite"],
                    &["rain cover", "padded straps", "quick release"],
                    &["weekend hikes", "long rides", "team practice"],
                    &[
                        "is the {noun} waterproof?",
                        "how many people fit in the {noun}?",
                        "is the {material} {noun} good for beginners?",
                        "does the {feature} fit other models?",
                        "can the {brand} {noun} handle heavy rain?",
                        "what size {noun} should i order?",
                    ],
                ),
                ty(
                    "electronics",
                    &["speaker", "charger", "headset", "camera"],
                    &["aluminum", "rubber", "plastic", "glass"],
                    &["bluetooth pairing", "fast charging", "noise canceling"],
                    &["travel", "gaming", "video calls"],
                    &[
                        "how long does the battery last?",
                        "is the {noun} compatible with iphone?",
                        "does the {feature} work with android?",
                        "can the {brand} {noun} connect to two devices?",
                        "does the {noun} support usb c?",
                        "does the {material} casing get hot?",
                    ],
                ),
                ty(
                    "home",
                    &["lamp", "rug", "curtain", "pillow"],
                    &["cotton", "wool", "linen", "bamboo"],
                    &["dimmer switch", "blackout lining", "removable cover"],
                    &["bedrooms", "living rooms", "guest rooms"],
                    &[
                        "is the {material} {noun} machine washable?",
                        "does the {noun} block out light?",
                        "what bulb does the {noun} take?",
                        "does the {feature} come installed?",
                        "will the {brand} {noun} fade in the sun?",
                        "is the {material} soft or scratchy?",
                    ],
                ),
            ],
            brands: strings(&["acme", "zenith", "nordvik", "solano", "brightline", "keystone", "oakhurst", "vela"]),
            colors: strings(&["black", "white", "red", "blue", "gray", "green"]),
            general_share: 0.7,
        }
    }
}

impl TemplateLibrary {
    fn validate(&self) -> Result<()> {
        let specific: usize = self.types.iter().map(|t| t.specific.len()).sum();
        if self.general.is_empty() || self.types.is_empty() || specific == 0 {
            return Err(Error::Config(
                "template library needs general templates and at least one product type with specific templates".into(),
            ));
        }
        if self.general.len() + specific < 8 {
            return Err(Error::Config(format!(
                "template library has {} templates, at least 8 are required",
                self.general.len() + specific
            )));
        }
        for t in &self.types {
            for (what, list) in [("nouns", &t.nouns), ("materials", &t.materials), ("features", &t.features), ("uses", &t.uses)] {
                if list.is_empty() {
                    return Err(Error::Config(format!("product type {} has no {what}", t.name)));
                }
            }
        }
        if self.brands.is_empty() || self.colors.is_empty() {
            return Err(Error::Config("template library needs brands and colors".into()));
        }
        if !(0.0..=1.0).contains(&self.general_share) {
            return Err(Error::Config(format!("general_share {} outside [0, 1]", self.general_share)));
        }
        Ok(())
    }
}

struct Slots<'a> {
    noun: &'a str,
    material: &'a str,
    feature: &'a str,
    brand: &'a str,
    color: &'a str,
}

fn fill(template: &str, s: &Slots) -> String {
    template
        .replace("{noun}", s.noun)
        .replace("{material}", s.material)
        .replace("{feature}", s.feature)
        .replace("{brand}", s.brand)
        .replace("{color}", s.color)
}

/// Generates `n_products` records deterministically from `seed`.
pub fn synth_corpus(seed: u64, n_products: usize, library: &TemplateLibrary) -> Result<Vec<ProductRecord>> {
    library.validate()?;
    if n_products == 0 {
        return Err(Error::Config("number of products must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_products);
    for i in 0..n_products {
        let ty = library.types.choose(&mut rng).expect("validated");
        let slots = Slots {
            noun: ty.nouns.choose(&mut rng).expect("validated"),
            material: ty.materials.choose(&mut rng).expect("validated"),
            feature: ty.features.choose(&mut rng).expect("validated"),
            brand: library.brands.choose(&mut rng).expect("validated"),
            color: library.colors.choose(&mut rng).expect("validated"),
        };
        let usage = ty.uses.choose(&mut rng).expect("validated");
        let context = format!(
            "{brand} {color} {material} {noun} for {usage}. this {noun} is made of {material} and has a {feature}.",
            brand = slots.brand,
            color = slots.color,
            material = slots.material,
            noun = slots.noun,
            feature = slots.feature,
        );

        let count = rng.gen_range(MIN_QUESTIONS..=MAX_QUESTIONS);
        let mut general: Vec<&String> = library.general.iter().collect();
        let mut specific: Vec<&String> = ty.specific.iter().collect();
        let mut questions = Vec::with_capacity(count);
        while questions.len() < count && !(general.is_empty() && specific.is_empty()) {
            let want_general = rng.gen_bool(library.general_share);
            let pool = match (want_general, general.is_empty(), specific.is_empty()) {
                (true, false, _) | (false, false, true) => &mut general,
                _ => &mut specific,
            };
            let pick = rng.gen_range(0..pool.len());
            let template = pool.swap_remove(pick);
            questions.push(fill(template, &slots));
        }
        out.push(ProductRecord {
            product_id: format!("P{i:05}"),
            context,
            questions,
        });
    }
    Ok(out)
}
