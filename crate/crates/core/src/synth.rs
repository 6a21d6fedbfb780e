//! Deterministic template-based corpus of imaging-report style contexts.
//!
//! Each context is a short report: an optional history line followed by one
//! sentence per examined organ, either a normal statement or a finding with
//! size, descriptor and sub-location. Questions ask about organs; questions
//! about organs the report never examines, and size questions about normal
//! organs, are unanswerable. Annotated answer boundaries follow per-question
//! conventions with some annotator variation, so the answer pattern can only
//! be partly learned.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Answer, Corpus, CorpusError, QaRecord, Split};
use crate::hashing::sub_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_contexts: usize,
    pub dev_contexts: usize,
    pub test_contexts: usize,
    /// Probability that an annotator departs from the question's usual answer boundary.
    pub boundary_noise: f64,
    /// Probability that a question targets an organ absent from the report.
    pub absent_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 2024,
            train_contexts: 150,
            dev_contexts: 30,
            test_contexts: 30,
            boundary_noise: 0.25,
            absent_rate: 0.18,
        }
    }
}

struct Organ {
    name: &'static str,
    parts: &'static [&'static str],
}

const ORGANS: &[Organ] = &[
    Organ { name: "liver", parts: &["right lobe", "left lobe", "caudate lobe", "dome"] },
    Organ { name: "spleen", parts: &["upper pole", "lower pole", "hilum"] },
    Organ { name: "pancreas", parts: &["head", "body", "tail", "uncinate process"] },
    Organ { name: "gallbladder", parts: &["fundus", "neck", "body"] },
    Organ { name: "right kidney", parts: &["upper pole", "lower pole", "interpolar region"] },
    Organ { name: "left kidney", parts: &["upper pole", "lower pole", "interpolar region"] },
    Organ { name: "right adrenal gland", parts: &["medial limb", "lateral limb"] },
    Organ { name: "left adrenal gland", parts: &["medial limb", "lateral limb"] },
    Organ { name: "bladder", parts: &["dome", "trigone", "posterior wall"] },
    Organ { name: "prostate", parts: &["left lobe", "right lobe", "apex"] },
    Organ { name: "right lung", parts: &["upper lobe", "middle lobe", "lower lobe"] },
    Organ { name: "left lung", parts: &["upper lobe", "lingula", "lower lobe"] },
    Organ { name: "thyroid", parts: &["right lobe", "left lobe", "isthmus"] },
    Organ { name: "uterus", parts: &["fundus", "anterior wall", "posterior wall"] },
];

const DESCRIPTORS: &[&str] = &[
    "hypodense", "hyperdense", "cystic", "enhancing", "calcified", "heterogeneous", "exophytic",
    "well-circumscribed", "ill-defined", "hypoechoic", "solid",
];
const LESIONS: &[&str] = &["lesion", "mass", "nodule", "cyst", "focus", "opacity"];
const NORMALS: &[&str] = &[
    "normal in appearance",
    "unremarkable",
    "within normal limits",
    "without focal abnormality",
    "normal in size and contour",
];
const HISTORY: &[&str] = &["pain", "follow-up", "evaluation", "screening", "trauma", "mass"];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Shape {
    /// `2.1 cm hypodense lesion`
    Sized,
    /// `hypodense lesion`
    Core,
    /// `2.1 cm hypodense lesion in the right lobe`
    Located,
}

struct Finding {
    size: String,
    descriptor: &'static str,
    lesion: &'static str,
    part: &'static str,
}

/// Byte ranges of the answerable phrases inside a rendered sentence.
struct Spans {
    sized: Option<(usize, usize)>,
    core: Option<(usize, usize)>,
    located: Option<(usize, usize)>,
    size: Option<(usize, usize)>,
    normal: Option<(usize, usize)>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn locate(sentence: &str, phrase: &str) -> (usize, usize) {
    let s = sentence.find(phrase).expect("phrase is part of its sentence");
    (s, s + phrase.len())
}

fn render_finding(organ: &Organ, f: &Finding, rng: &mut impl Rng) -> (String, Spans) {
    let core = format!("{} {}", f.descriptor, f.lesion);
    let sized = format!("{} {core}", f.size);
    let located = format!("{sized} in the {}", f.part);
    let o = organ.name;
    let (sentence, has_located) = match rng.random_range(0..6) {
        0 => (format!("There is a {located} of the {o}."), true),
        1 => (format!("The {o} demonstrates a {located}."), true),
        2 => (format!("A {located} of the {o} is noted."), true),
        3 => (format!("{}: {sized}, {}.", capitalize(o), f.part), false),
        4 => (format!("Within the {o} there is a {sized} near the {}.", f.part), false),
        _ => (format!("In the {o}, a {core} measuring {} is seen in the {}.", f.size, f.part), false),
    };
    let sized_span = sentence.contains(&sized).then(|| locate(&sentence, &sized));
    let spans = Spans {
        sized: sized_span,
        core: Some(locate(&sentence, &core)),
        located: has_located.then(|| locate(&sentence, &located)),
        size: Some(locate(&sentence, &f.size)),
        normal: None,
    };
    (sentence, spans)
}

fn render_normal(organ: &Organ, rng: &mut impl Rng) -> (String, Spans) {
    let phrase = *NORMALS.choose(rng).unwrap();
    let o = organ.name;
    let sentence = match rng.random_range(0..3) {
        0 => format!("The {o} is {phrase}."),
        1 => format!("{}: {phrase}.", capitalize(o)),
        _ => format!("The {o} appears {phrase}."),
    };
    let spans = Spans {
        sized: None,
        core: None,
        located: None,
        size: None,
        normal: Some(locate(&sentence, phrase)),
    };
    (sentence, spans)
}

#[derive(Clone, Copy)]
enum Ask {
    Abnormality,
    Seen,
    Describe,
    Size,
}

impl Ask {
    fn question(self, organ: &str, rng: &mut impl Rng) -> String {
        match self {
            Ask::Abnormality => {
                let forms = ["Is there any abnormality in the {}?", "Any abnormal finding in the {}?"];
                forms.choose(rng).unwrap().replace("{}", organ)
            }
            Ask::Seen => {
                let forms = ["What is seen in the {}?", "What lesion is in the {}?"];
                forms.choose(rng).unwrap().replace("{}", organ)
            }
            Ask::Describe => format!("How does the {organ} look?"),
            Ask::Size => format!("What is the size of the {organ} lesion?"),
        }
    }

    /// The boundary an annotator usually marks for this kind of question.
    fn usual_shape(self) -> Shape {
        match self {
            Ask::Abnormality => Shape::Sized,
            Ask::Seen => Shape::Core,
            Ask::Describe | Ask::Size => Shape::Located,
        }
    }
}

fn pick_answer(spans: &Spans, ask: Ask, noise: f64, rng: &mut impl Rng) -> Option<(usize, usize)> {
    if let Ask::Size = ask {
        return spans.size;
    }
    if spans.normal.is_some() {
        return spans.normal;
    }
    let mut shape = ask.usual_shape();
    if rng.random_bool(noise) {
        shape = *[Shape::Sized, Shape::Core, Shape::Located].choose(rng).unwrap();
    }
    let by_shape = |s: Shape| match s {
        Shape::Sized => spans.sized,
        Shape::Core => spans.core,
        Shape::Located => spans.located,
    };
    by_shape(shape).or(spans.sized).or(spans.core)
}

fn report(index: usize, split: Split, config: &SynthConfig, rng: &mut impl Rng) -> Vec<QaRecord> {
    let mut order: Vec<usize> = (0..ORGANS.len()).collect();
    order.shuffle(rng);
    let examined = rng.random_range(3..=5);
    let (present, absent) = order.split_at(examined);

    let mut context = String::new();
    if rng.random_bool(0.5) {
        let organ = ORGANS[absent[0]].name;
        context.push_str(&format!("History: {organ} {}. ", HISTORY.choose(rng).unwrap()));
    }
    let mut sections = Vec::new();
    for &o in present {
        let organ = &ORGANS[o];
        let (sentence, spans) = if rng.random_bool(0.6) {
            let finding = Finding {
                size: format!("{}.{} cm", rng.random_range(0..6), rng.random_range(1..10)),
                descriptor: DESCRIPTORS.choose(rng).unwrap(),
                lesion: LESIONS.choose(rng).unwrap(),
                part: organ.parts.choose(rng).unwrap(),
            };
            render_finding(organ, &finding, rng)
        } else {
            render_normal(organ, rng)
        };
        if !context.is_empty() {
            context.push(' ');
        }
        let offset = context.len();
        context.push_str(&sentence);
        sections.push((o, offset, spans));
    }

    let mut records = Vec::new();
    let n_questions = rng.random_range(3..=5);
    for q in 0..n_questions {
        let ask = *[Ask::Abnormality, Ask::Seen, Ask::Describe, Ask::Size].choose(rng).unwrap();
        let (organ, answer) = if rng.random_bool(config.absent_rate) {
            (ORGANS[*absent.choose(rng).unwrap()].name, None)
        } else {
            let (o, offset, spans) = sections.choose(rng).unwrap();
            let answer = pick_answer(spans, ask, config.boundary_noise, rng).map(|(s, e)| (s + offset, e + offset));
            (ORGANS[*o].name, answer)
        };
        let gold_answers: Vec<Answer> = answer
            .map(|(s, e)| Answer {
                text: context[s..e].to_string(),
                answer_start: context[..s].chars().count(),
            })
            .into_iter()
            .collect();
        records.push(QaRecord {
            id: format!("{split}-{index:04}-q{q}"),
            context: context.clone(),
            question: ask.question(organ, rng),
            is_answerable: !gold_answers.is_empty(),
            gold_answers,
        });
    }
    // questions of one report stay distinct
    let mut seen = std::collections::HashSet::new();
    records.retain(|r| seen.insert(r.question.clone()));
    records
}

/// Generate one split. Splits draw from disjoint seed streams.
pub fn generate_split(config: &SynthConfig, split: Split) -> Result<Corpus, CorpusError> {
    let contexts = match split {
        Split::Train => config.train_contexts,
        Split::Dev => config.dev_contexts,
        Split::Test => config.test_contexts,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, &format!("synth-{split}")));
    let records = (0..contexts).flat_map(|i| report(i, split, config, &mut rng)).collect();
    Corpus::new(records, split)
}

pub struct SynthCorpora {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpora, CorpusError> {
    Ok(SynthCorpora {
        train: generate_split(config, Split::Train)?,
        dev: generate_split(config, Split::Dev)?,
        test: generate_split(config, Split::Test)?,
    })
}
