//! Templated referring expressions and their predicate semantics.

use serde::{Deserialize, Serialize};

use crate::scene::{Color, SceneObject, SceneSpec, ShapeKind, Size};

/// Minimum center gap, in pixels, for a spatial comparison to count.
pub const SPATIAL_MARGIN: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extreme {
    Leftmost,
    Rightmost,
    Topmost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    ColorShape,
    SizeColorShape,
    Relation,
    Extreme,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::ColorShape,
        Template::SizeColorShape,
        Template::Relation,
        Template::Extreme,
    ];

    /// Relational templates cannot be resolved from attributes alone.
    pub fn is_relational(self) -> bool {
        matches!(self, Template::Relation | Template::Extreme)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Expression {
    ColorShape {
        color: Color,
        shape: ShapeKind,
    },
    SizeColorShape {
        size: Size,
        color: Color,
        shape: ShapeKind,
    },
    Relation {
        shape: ShapeKind,
        relation: Relation,
        anchor_color: Color,
        anchor_shape: ShapeKind,
    },
    Extreme {
        extreme: Extreme,
        shape: ShapeKind,
    },
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Whether `a` stands in this relation to `b`.
    pub fn holds(self, a: &SceneObject, b: &SceneObject) -> bool {
        let m = SPATIAL_MARGIN;
        match self {
            Relation::LeftOf => a.cx + m < b.cx,
            Relation::RightOf => a.cx > b.cx + m,
            Relation::Above => a.cy + m < b.cy,
            Relation::Below => a.cy > b.cy + m,
        }
    }

    fn opposite(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }
}

impl Extreme {
    pub const ALL: [Extreme; 3] = [Extreme::Leftmost, Extreme::Rightmost, Extreme::Topmost];

    pub fn word(self) -> &'static str {
        match self {
            Extreme::Leftmost => "leftmost",
            Extreme::Rightmost => "rightmost",
            Extreme::Topmost => "topmost",
        }
    }

    /// Sort key that is smallest for the extreme object.
    fn key(self, o: &SceneObject) -> i64 {
        match self {
            Extreme::Leftmost => o.cx as i64,
            Extreme::Rightmost => -(o.cx as i64),
            Extreme::Topmost => o.cy as i64,
        }
    }
}

/// Every word any template can emit, sorted.
pub fn lexicon() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(ShapeKind::ALL.iter().map(|s| s.word()));
    words.extend(Size::ALL.iter().map(|s| s.word()));
    words.extend(Extreme::ALL.iter().map(|e| e.word()));
    words.extend(["left", "right", "of", "above", "below", "the"]);
    words.sort_unstable();
    words.dedup();
    words
}

impl Expression {
    pub fn template(&self) -> Template {
        match self {
            Expression::ColorShape { .. } => Template::ColorShape,
            Expression::SizeColorShape { .. } => Template::SizeColorShape,
            Expression::Relation { .. } => Template::Relation,
            Expression::Extreme { .. } => Template::Extreme,
        }
    }

    pub fn text(&self) -> String {
        match *self {
            Expression::ColorShape { color, shape } => format!("{} {}", color.word(), shape.word()),
            Expression::SizeColorShape { size, color, shape } => {
                format!("{} {} {}", size.word(), color.word(), shape.word())
            }
            Expression::Relation {
                shape,
                relation,
                anchor_color,
                anchor_shape,
            } => format!(
                "{} {} the {} {}",
                shape.word(),
                relation.words(),
                anchor_color.word(),
                anchor_shape.word()
            ),
            Expression::Extreme { extreme, shape } => format!("{} {}", extreme.word(), shape.word()),
        }
    }

    /// Indices of the objects the expression picks out.
    pub fn referents(&self, scene: &SceneSpec) -> Vec<usize> {
        let objs = &scene.objects;
        let idx = |f: &dyn Fn(&SceneObject) -> bool| (0..objs.len()).filter(|&i| f(&objs[i])).collect::<Vec<_>>();
        match *self {
            Expression::ColorShape { color, shape } => idx(&|o| o.color == color && o.shape == shape),
            Expression::SizeColorShape { size, color, shape } => {
                idx(&|o| o.size == size && o.color == color && o.shape == shape)
            }
            Expression::Relation {
                shape,
                relation,
                anchor_color,
                anchor_shape,
            } => {
                let anchors = idx(&|o| o.color == anchor_color && o.shape == anchor_shape);
                let [anchor] = anchors[..] else { return Vec::new() };
                (0..objs.len())
                    .filter(|&i| i != anchor && objs[i].shape == shape && relation.holds(&objs[i], &objs[anchor]))
                    .collect()
            }
            Expression::Extreme { extreme, shape } => {
                let cands = idx(&|o| o.shape == shape);
                let Some(best) = cands.iter().map(|&i| extreme.key(&objs[i])).min() else {
                    return Vec::new();
                };
                cands.into_iter().filter(|&i| extreme.key(&objs[i]) == best).collect()
            }
        }
    }

    /// The single referent, if the expression is unambiguous on `scene` with
    /// clear spatial margins, together with the template-specific constraints.
    pub fn unique_referent(&self, scene: &SceneSpec) -> Option<usize> {
        let refs = self.referents(scene);
        let [r] = refs[..] else { return None };
        let objs = &scene.objects;
        match *self {
            Expression::Relation {
                shape,
                relation,
                anchor_color,
                anchor_shape,
            } => {
                let anchor = objs
                    .iter()
                    .position(|o| o.color == anchor_color && o.shape == anchor_shape)?;
                let others: Vec<usize> = (0..objs.len())
                    .filter(|&i| i != anchor && i != r && objs[i].shape == shape)
                    .collect();
                // Shape alone must be ambiguous, and distractors must be clearly on the other side.
                if others.is_empty() {
                    return None;
                }
                let clear = others
                    .iter()
                    .all(|&i| relation.opposite().holds(&objs[i], &objs[anchor]));
                clear.then_some(r)
            }
            Expression::Extreme { extreme, shape } => {
                let mut keys: Vec<i64> = objs
                    .iter()
                    .filter(|o| o.shape == shape)
                    .map(|o| extreme.key(o))
                    .collect();
                if keys.len() < 2 {
                    return None;
                }
                keys.sort_unstable();
                (keys[1] - keys[0] > SPATIAL_MARGIN as i64).then_some(r)
            }
            _ => Some(r),
        }
    }

    /// All expressions of one template that are valid on `scene`, in a fixed order.
    pub fn candidates(template: Template, scene: &SceneSpec) -> Vec<(Expression, usize)> {
        let mut out = Vec::new();
        let mut push = |e: Expression| {
            if let Some(r) = e.unique_referent(scene) {
                out.push((e, r));
            }
        };
        match template {
            Template::ColorShape => {
                for o in &scene.objects {
                    push(Expression::ColorShape {
                        color: o.color,
                        shape: o.shape,
                    });
                }
            }
            Template::SizeColorShape => {
                for o in &scene.objects {
                    push(Expression::SizeColorShape {
                        size: o.size,
                        color: o.color,
                        shape: o.shape,
                    });
                }
            }
            Template::Relation => {
                for anchor in &scene.objects {
                    for shape in ShapeKind::ALL {
                        for relation in Relation::ALL {
                            push(Expression::Relation {
                                shape,
                                relation,
                                anchor_color: anchor.color,
                                anchor_shape: anchor.shape,
                            });
                        }
                    }
                }
            }
            Template::Extreme => {
                for extreme in Extreme::ALL {
                    for shape in ShapeKind::ALL {
                        push(Expression::Extreme { extreme, shape });
                    }
                }
            }
        }
        out
    }
}

/// Swaps left/right words, the expression-side counterpart of a horizontal image flip.
pub fn mirror_words(expression: &str) -> String {
    expression
        .split_whitespace()
        .map(|w| match w {
            "left" => "right",
            "right" => "left",
            "leftmost" => "rightmost",
            "rightmost" => "leftmost",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}
