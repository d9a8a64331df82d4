use std::collections::HashMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;

use super::vocab::{coordinate_words, number_token, Vocabulary};
use crate::geometry::{rotate, Point};
use crate::world::{behavior_label, ego_behavior, Agent, BehaviorLabel, Category, Motion, Scene, SpeedClass};
use crate::{Error, Result};

pub const TEMPLATE_TEXT: &str = include_str!("../../assets/qa_templates.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QaCategory {
    Perception,
    Prediction,
    Planning,
    Behavior,
    Edit,
}

impl QaCategory {
    /// The four categories sampled from every scene.
    pub const SCENE: [QaCategory; 4] = [
        QaCategory::Perception,
        QaCategory::Prediction,
        QaCategory::Planning,
        QaCategory::Behavior,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "perception" => Some(QaCategory::Perception),
            "prediction" => Some(QaCategory::Prediction),
            "planning" => Some(QaCategory::Planning),
            "behavior" => Some(QaCategory::Behavior),
            "edit" => Some(QaCategory::Edit),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Word(String),
    Slot(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub category: QaCategory,
    question: Vec<Piece>,
    answer: Vec<Piece>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaPair {
    pub category: QaCategory,
    pub template: String,
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

impl QaPair {
    pub fn question_text(&self) -> String {
        self.question.join(" ")
    }

    pub fn answer_text(&self) -> String {
        self.answer.join(" ")
    }

    pub fn ids(&self, vocab: &Vocabulary) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((vocab.encode(&self.question_text())?, vocab.encode(&self.answer_text())?))
    }
}

pub type Slots = HashMap<&'static str, Vec<String>>;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn pieces(text: &str, line: usize) -> Result<Vec<Piece>> {
    text.split_whitespace()
        .map(|w| {
            if let Some(inner) = w.strip_prefix('{') {
                inner
                    .strip_suffix('}')
                    .filter(|s| !s.is_empty())
                    .map(|s| Piece::Slot(s.to_string()))
                    .ok_or_else(|| Error::Config(format!("template line {line}: malformed slot {w}")))
            } else {
                Ok(Piece::Word(w.to_string()))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub version: u32,
    pub templates: Vec<Template>,
}

impl TemplateSet {
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut templates = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("version ") {
                version = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("template line {}: bad version", i + 1)))?,
                );
                continue;
            }
            let fields: Vec<&str> = line.split('|').map(str::trim).collect();
            let [id, cat, q, a] = fields[..] else {
                return Err(Error::Config(format!("template line {}: expected 4 fields", i + 1)));
            };
            let category = QaCategory::parse(cat)
                .ok_or_else(|| Error::Config(format!("template line {}: unknown category {cat}", i + 1)))?;
            if q.is_empty() || a.is_empty() {
                return Err(Error::Config(format!("template line {}: empty question or answer", i + 1)));
            }
            templates.push(Template {
                id: id.to_string(),
                category,
                question: pieces(q, i + 1)?,
                answer: pieces(a, i + 1)?,
            });
        }
        let version = version.ok_or_else(|| Error::Config("template file has no version line".into()))?;
        Ok(Self { version, templates })
    }

    pub fn builtin() -> &'static TemplateSet {
        static SET: OnceLock<TemplateSet> = OnceLock::new();
        SET.get_or_init(|| TemplateSet::parse(TEMPLATE_TEXT).expect("bundled templates parse"))
    }

    pub fn get(&self, id: &str) -> Result<&Template> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::NotFound(format!("template {id}")))
    }

    /// Every literal word in questions and answers.
    pub fn literal_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.templates {
            for p in t.question.iter().chain(&t.answer) {
                if let Piece::Word(w) = p {
                    out.push(w.clone());
                }
            }
        }
        out
    }

    pub fn fill(&self, id: &str, slots: &Slots) -> Result<QaPair> {
        let t = self.get(id)?;
        let expand = |ps: &[Piece]| -> Result<Vec<String>> {
            let mut out = Vec::new();
            for p in ps {
                match p {
                    Piece::Word(w) => out.push(w.clone()),
                    Piece::Slot(s) => out.extend(
                        slots
                            .get(s.as_str())
                            .ok_or_else(|| Error::Contract(format!("template {id} needs slot {s}")))?
                            .iter()
                            .cloned(),
                    ),
                }
            }
            Ok(out)
        };
        Ok(QaPair {
            category: t.category,
            template: id.to_string(),
            question: expand(&t.question)?,
            answer: expand(&t.answer)?,
        })
    }
}

/// The closed vocabulary implied by the bundled templates.
pub fn builtin_vocabulary() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(|| {
        Vocabulary::build(TemplateSet::builtin().literal_words()).expect("bundled vocabulary fits")
    })
}

pub fn motion_words(label: &BehaviorLabel) -> Vec<String> {
    let side = |s: &str| {
        if label.slight {
            format!("slightly steering to the {s}")
        } else {
            format!("steering to the {s}")
        }
    };
    words(&match label.motion {
        Motion::Stopped => "stopped".to_string(),
        Motion::GoingStraight => "going straight".to_string(),
        Motion::SteeringLeft => side("left"),
        Motion::SteeringRight => side("right"),
        Motion::Reversing => "reversing".to_string(),
    })
}

pub fn speed_words(speed: SpeedClass) -> Vec<String> {
    words(match speed {
        SpeedClass::NotMoving => "and not moving",
        SpeedClass::Slow => "at a slow speed",
        SpeedClass::Moderate => "at a moderate speed",
        SpeedClass::Fast => "at a fast speed",
    })
}

fn is_vehicle(c: Category) -> bool {
    matches!(c, Category::Car | Category::Truck)
}

fn closest(scene: &Scene, keep: impl Fn(&Agent) -> bool) -> Option<&Agent> {
    scene
        .agents
        .iter()
        .filter(|a| keep(a))
        .min_by(|a, b| {
            let da = a.position_at(0)[0].hypot(a.position_at(0)[1]);
            let db = b.position_at(0)[0].hypot(b.position_at(0)[1]);
            da.total_cmp(&db).then(a.id.cmp(&b.id))
        })
}

fn in_front(a: &Agent) -> bool {
    let p = a.position_at(0);
    p[0] > 0.0 && p[0] <= 30.0 && p[1].abs() <= 2.0
}

/// Label of an agent's own motion, in its own frame.
pub fn agent_behavior(a: &Agent) -> BehaviorLabel {
    let origin = a.position_at(0);
    let traj: Vec<Point> = (0..=a.trajectory.len())
        .map(|k| {
            let p = a.position_at(k);
            rotate([p[0] - origin[0], p[1] - origin[1]], -a.heading)
        })
        .collect();
    behavior_label(&traj, &vec![a.speed; a.trajectory.len()]).expect("agent trajectory has 7 points")
}

fn xy(slots: &mut Slots, p: Point) {
    slots.insert("x", coordinate_words(p[0]));
    slots.insert("y", coordinate_words(p[1]));
}

/// One templated QA pair of `category` about `scene`.
pub fn scene_qa<R: Rng>(scene: &Scene, category: QaCategory, rng: &mut R) -> Result<QaPair> {
    let set = TemplateSet::builtin();
    let mut slots = Slots::new();
    let id = match category {
        QaCategory::Perception => match rng.gen_range(0..3) {
            0 => {
                let n = scene.agents.iter().filter(|a| is_vehicle(a.category)).count();
                slots.insert("count", vec![number_token(n as f64)]);
                "perception.count"
            }
            1 => {
                let cat = *Category::ALL.choose(rng).expect("nonempty");
                let hit = scene.agents.iter().any(|a| a.category == cat && in_front(a));
                slots.insert("category", words(cat.name()));
                slots.insert("yes_no", words(if hit { "yes" } else { "no" }));
                slots.insert("there_is", words(if hit { "there is a" } else { "there is no" }));
                "perception.front"
            }
            _ => {
                let cat = *Category::ALL.choose(rng).expect("nonempty");
                slots.insert("category", words(cat.name()));
                match closest(scene, |a| a.category == cat) {
                    Some(a) => {
                        xy(&mut slots, a.position_at(0));
                        "perception.closest"
                    }
                    None => "perception.closest.none",
                }
            }
        },
        QaCategory::Prediction => {
            let target = closest(scene, |a| is_vehicle(a.category));
            let motion = rng.gen_bool(0.5);
            match (target, motion) {
                (None, true) => "prediction.motion.none",
                (None, false) => "prediction.position.none",
                (Some(a), true) => {
                    let label = agent_behavior(a);
                    slots.insert("category", words(a.category.name()));
                    slots.insert("motion", motion_words(&label));
                    slots.insert("speed", speed_words(label.speed));
                    "prediction.motion"
                }
                (Some(a), false) => {
                    slots.insert("category", words(a.category.name()));
                    xy(&mut slots, a.trajectory[a.trajectory.len() - 1]);
                    "prediction.position"
                }
            }
        }
        QaCategory::Planning => {
            let seconds = rng.gen_range(1..=3usize);
            slots.insert("seconds", vec![number_token(seconds as f64)]);
            xy(&mut slots, scene.ego.gt_traj[2 * seconds - 1]);
            "planning.waypoint"
        }
        QaCategory::Behavior => {
            let label = ego_behavior(scene);
            slots.insert("motion", motion_words(&label));
            slots.insert("speed", speed_words(label.speed));
            "behavior.ego"
        }
        QaCategory::Edit => {
            return Err(Error::Contract("edit questions come from scene edits".into()));
        }
    };
    set.fill(id, &slots)
}
