//! Deterministic desk-scale data generators.
//!
//! Every generator is a pure function of its `(count, seed)` arguments.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::{Label, RawDataset, RawSample, Split};
use crate::task::TaskId;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const BACKGROUND: [f32; 3] = [0.05, 0.05, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const VQA: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
    pub const CLASSES: [Shape; 5] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Whether pixel `(x, y)` of an `s`-sized box at `(x0, y0)` is covered.
    pub fn covers(self, x0: usize, y0: usize, s: usize, x: usize, y: usize) -> bool {
        if x < x0 || y < y0 || x >= x0 + s || y >= y0 + s {
            return false;
        }
        let (fx, fy) = ((x - x0) as f32 + 0.5, (y - y0) as f32 + 0.5);
        let half = s as f32 / 2.0;
        let (dx, dy) = (fx - half, fy - half);
        match self {
            Shape::Square => true,
            Shape::Circle => dx * dx + dy * dy <= half * half,
            Shape::Triangle => dx.abs() <= half * fy / s as f32,
            Shape::Cross => dx.abs() <= s as f32 / 6.0 || dy.abs() <= s as f32 / 6.0,
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= half * half && r2 >= (0.55 * half) * (0.55 * half)
            }
        }
    }
}

pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.1]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.9, 0.1, 0.9]),
    ("cyan", [0.1, 0.9, 0.9]),
];

/// Closed answer set of the toy VQA task.
pub const VQA_ANSWERS: [&str; 12] = [
    "red", "green", "blue", "yellow", "magenta", "cyan", "square", "circle", "triangle", "one", "two",
    "three",
];

pub fn answer_id(answer: &str) -> Option<u32> {
    VQA_ANSWERS.iter().position(|&a| a == answer).map(|i| i as u32)
}

fn draw_shape(img: &mut Image, shape: Shape, x0: usize, y0: usize, s: usize, rgb: [f32; 3]) {
    for y in y0..(y0 + s).min(img.height) {
        for x in x0..(x0 + s).min(img.width) {
            if shape.covers(x0, y0, s, x, y) {
                img.set_pixel(y, x, &rgb);
            }
        }
    }
}

/// One toy VQA scene: up to three non-touching objects, one per quadrant,
/// with distinct shapes and colors.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<(Shape, usize)>,
}

fn render_scene(rng: &mut ChaCha8Rng) -> (Image, Scene) {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, CHANNELS, 0.0);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            img.set_pixel(y, x, &BACKGROUND);
        }
    }
    let count = rng.random_range(1..=3usize);
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(rng);
    let mut shapes = Shape::VQA.to_vec();
    shapes.shuffle(rng);
    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    colors.shuffle(rng);
    let cell = IMAGE_SIZE / 2;
    let mut objects = Vec::with_capacity(count);
    for i in 0..count {
        let s = rng.random_range(9..=13usize);
        let q = quadrants[i];
        let x0 = (q % 2) * cell + rng.random_range(1..=cell - s - 1);
        let y0 = (q / 2) * cell + rng.random_range(1..=cell - s - 1);
        draw_shape(&mut img, shapes[i], x0, y0, s, COLORS[colors[i]].1);
        objects.push((shapes[i], colors[i]));
    }
    (img, Scene { objects })
}

fn count_word(n: usize) -> &'static str {
    ["zero", "one", "two", "three"][n]
}

/// Synthetic visual question answering over rendered shape scenes.
pub fn make_toy_vqa(num_samples: usize, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5651_4100);
    let samples = (0..num_samples)
        .map(|_| {
            let (image, scene) = render_scene(&mut rng);
            let (question, answer) = match rng.random_range(0..3u8) {
                0 => {
                    let &(shape, color) = scene.objects.choose(&mut rng).unwrap();
                    (format!("what color is the {} ?", shape.name()), COLORS[color].0)
                }
                1 => {
                    let &(shape, color) = scene.objects.choose(&mut rng).unwrap();
                    (format!("what shape is the {} object ?", COLORS[color].0), shape.name())
                }
                _ => (
                    "how many objects are there ?".to_string(),
                    count_word(scene.objects.len()),
                ),
            };
            RawSample {
                image: Some(image),
                text: Some(question),
                label: Label::Answer(answer_id(answer).unwrap()),
            }
        })
        .collect();
    RawDataset {
        task: TaskId::Vqa,
        split: Split::Train,
        samples,
    }
}

/// One hue per class, roughly evenly spaced around the colour wheel.
const CLASS_COLORS: [[f32; 3]; 10] = [
    [0.95, 0.15, 0.1],
    [0.95, 0.55, 0.1],
    [0.9, 0.9, 0.15],
    [0.5, 0.9, 0.1],
    [0.1, 0.85, 0.3],
    [0.1, 0.85, 0.85],
    [0.1, 0.45, 0.95],
    [0.3, 0.15, 0.95],
    [0.7, 0.15, 0.95],
    [0.95, 0.15, 0.6],
];
pub const IMAGE_CLASSES: usize = 10;

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Ten-class shape images on smooth gradient backgrounds. Class `c` is the
/// shape `c % 5` drawn in a jittered version of the class colour.
pub fn render_class_image(class: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, CHANNELS, 0.0);
    let grey = |rng: &mut ChaCha8Rng| {
        let base = rng.random_range(0.15..0.7f32);
        let tint = [rng.random_range(-0.08..0.08f32), rng.random_range(-0.08..0.08f32), rng.random_range(-0.08..0.08f32)];
        [base + tint[0], base + tint[1], base + tint[2]]
    };
    let (c0, c1) = (grey(rng), grey(rng));
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (ux, uy) = (angle.cos(), angle.sin());
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let t = ((x as f32 - 15.5) * ux + (y as f32 - 15.5) * uy) / 44.0 + 0.5;
            img.set_pixel(y, x, &lerp(c0, c1, t.clamp(0.0, 1.0)));
        }
    }
    let shape = Shape::CLASSES[class % 5];
    let base = CLASS_COLORS[class];
    let jitter = rng.random_range(-0.05..0.05f32);
    let rgb = [
        (base[0] + jitter).clamp(0.0, 1.0),
        (base[1] + jitter).clamp(0.0, 1.0),
        (base[2] + jitter).clamp(0.0, 1.0),
    ];
    let s = rng.random_range(12..=22usize);
    let x0 = rng.random_range(0..=IMAGE_SIZE - s);
    let y0 = rng.random_range(0..=IMAGE_SIZE - s);
    draw_shape(&mut img, shape, x0, y0, s, rgb);
    for v in img.data.iter_mut() {
        *v = (*v + rng.random_range(-0.02..0.02f32)).clamp(0.0, 1.0);
    }
    img
}

/// Class-balanced toy image set; stands in for a CIFAR-10 subset when no
/// data root is configured.
pub fn make_toy_images(task: TaskId, num_samples: usize, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A6E_0000);
    let samples = (0..num_samples)
        .map(|i| {
            let class = i % IMAGE_CLASSES;
            let image = render_class_image(class, &mut rng);
            let label = match task {
                TaskId::Retrieval => Label::Class(class as u32),
                _ => Label::Reconstruct,
            };
            RawSample {
                image: Some(image),
                text: None,
                label,
            }
        })
        .collect();
    RawDataset {
        task,
        split: Split::Train,
        samples,
    }
}

const POSITIVE: [&str; 12] = [
    "good", "great", "excellent", "wonderful", "brilliant", "delightful", "superb", "enjoyable",
    "charming", "moving", "fantastic", "pleasant",
];
const NEGATIVE: [&str; 12] = [
    "bad", "terrible", "awful", "boring", "dull", "horrible", "poor", "weak", "tedious",
    "disappointing", "mediocre", "painful",
];
const REVIEW_SUBJECTS: [&str; 9] = [
    "the movie", "this film", "the story", "the acting", "the plot", "the soundtrack", "the cast",
    "the ending", "the script",
];
const ADVERBS: [&str; 5] = ["very", "really", "quite", "truly", "rather"];

/// Templated binary sentiment sentences. About one in ten negates its
/// adjectives, which flips the label.
pub fn make_toy_sentiment(num_samples: usize, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E47_0000);
    let samples = (0..num_samples)
        .map(|_| {
            let positive = rng.random_bool(0.5);
            let negate = rng.random_bool(0.1);
            let pool = if positive != negate { &POSITIVE } else { &NEGATIVE };
            let adj = |rng: &mut ChaCha8Rng| *pool.choose(rng).unwrap();
            let subj = |rng: &mut ChaCha8Rng| *REVIEW_SUBJECTS.choose(rng).unwrap();
            let not = if negate { "not " } else { "" };
            let text = match rng.random_range(0..4u8) {
                0 => format!("{} was {not}{}", subj(&mut rng), adj(&mut rng)),
                1 => format!(
                    "{} was {not}{} {}",
                    subj(&mut rng),
                    ADVERBS.choose(&mut rng).unwrap(),
                    adj(&mut rng)
                ),
                2 => format!(
                    "i thought {} was {not}{} and {} was {not}{}",
                    subj(&mut rng),
                    adj(&mut rng),
                    subj(&mut rng),
                    adj(&mut rng)
                ),
                _ => format!("overall {} is {not}{} to watch", subj(&mut rng), adj(&mut rng)),
            };
            RawSample {
                image: None,
                text: Some(text),
                label: Label::Class(positive as u32),
            }
        })
        .collect();
    RawDataset {
        task: TaskId::Sentiment,
        split: Split::Train,
        samples,
    }
}

const BODIES: [&str; 8] = [
    "the commission", "the council", "the parliament", "the member states", "the committee",
    "the president", "this report", "the union",
];
const VERBS: [&str; 8] = [
    "supports", "rejects", "welcomes", "proposes", "adopts", "discusses", "considers", "approves",
];
const OBJECTS: [&str; 8] = [
    "the proposal", "the amendment", "the budget", "the resolution", "the agreement",
    "new measures", "the directive", "the framework",
];
const MODIFIERS: [&str; 8] = [
    "on energy", "for farmers", "in europe", "on human rights", "for next year", "on fisheries",
    "with concern", "without delay",
];

/// Proceedings-style sentences for the text reconstruction task.
pub fn make_toy_sentences(num_samples: usize, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E47_0000);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).unwrap();
    let samples = (0..num_samples)
        .map(|_| {
            let text = match rng.random_range(0..3u8) {
                0 => format!("{} {} {}", pick(&mut rng, &BODIES), pick(&mut rng, &VERBS), pick(&mut rng, &OBJECTS)),
                1 => format!(
                    "{} {} {} {}",
                    pick(&mut rng, &BODIES),
                    pick(&mut rng, &VERBS),
                    pick(&mut rng, &OBJECTS),
                    pick(&mut rng, &MODIFIERS)
                ),
                _ => format!(
                    "{} {} {} and {} {}",
                    pick(&mut rng, &BODIES),
                    pick(&mut rng, &VERBS),
                    pick(&mut rng, &OBJECTS),
                    pick(&mut rng, &VERBS),
                    pick(&mut rng, &OBJECTS)
                ),
            };
            RawSample {
                image: None,
                text: Some(text),
                label: Label::Reconstruct,
            }
        })
        .collect();
    RawDataset {
        task: TaskId::TextRecon,
        split: Split::Train,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_images_in_range() {
        let d = make_toy_images(TaskId::Retrieval, 20, 3);
        for s in &d.samples {
            let img = s.image.as_ref().unwrap();
            assert_eq!((img.height, img.width, img.channels), (32, 32, 3));
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(d.samples[13].label, Label::Class(3));
    }

    #[test]
    fn sentence_generators_fit_default_length() {
        for s in make_toy_sentences(200, 1).samples.iter().chain(&make_toy_sentiment(200, 1).samples) {
            assert!(s.text.as_ref().unwrap().split_whitespace().count() <= 16);
        }
    }

    #[test]
    fn vqa_single_sample_has_both_modalities() {
        let d = make_toy_vqa(1, 0);
        assert_eq!(d.samples.len(), 1);
        assert!(d.samples[0].image.is_some() && d.samples[0].text.is_some());
    }

    #[test]
    fn answer_set_is_small() {
        assert!(VQA_ANSWERS.len() <= 16);
        assert_eq!(answer_id("three"), Some(11));
    }
}
