use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Cube,
    Ball,
    Bowl,
    Bag,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Cube, Shape::Ball, Shape::Bowl, Shape::Bag];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Ball => "ball",
            Shape::Bowl => "bowl",
            Shape::Bag => "bag",
        }
    }

    pub fn graspable(self) -> bool {
        matches!(self, Shape::Cube | Shape::Ball)
    }

    pub fn container(self) -> bool {
        matches!(self, Shape::Bowl | Shape::Bag)
    }

    /// Footprint radius in pixels at the default 112 px render size.
    pub fn radius_px(self) -> f64 {
        match self {
            Shape::Cube => 8.0,
            Shape::Ball => 8.5,
            Shape::Bowl => 13.0,
            Shape::Bag => 12.0,
        }
    }

    pub fn from_index(i: u8) -> Option<Shape> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn index(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Orange,
    Purple,
    Brown,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Orange,
        Color::Purple,
        Color::Brown,
        Color::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::Brown => "brown",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [210, 40, 40],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 210],
            Color::Yellow => [230, 210, 40],
            Color::Orange => [240, 140, 30],
            Color::Purple => [140, 50, 170],
            Color::Brown => [120, 72, 30],
            Color::White => [245, 245, 245],
        }
    }

    pub fn from_index(i: u8) -> Option<Color> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn index(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    In,
    LeftOf,
    FrontOf,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::In, Relation::LeftOf, Relation::FrontOf];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::In => "in",
            Relation::LeftOf => "left of",
            Relation::FrontOf => "in front of",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Relation::In => "in",
            Relation::LeftOf => "left-of",
            Relation::FrontOf => "front-of",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ObjectRef {
    pub color: Color,
    pub shape: Shape,
}

/// `place the <color> <shape> (in | left of | in front of) the <color> <shape>`
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub pick: ObjectRef,
    pub relation: Relation,
    pub target: ObjectRef,
}

/// Closed word list of the template grammar, in vocabulary order.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words = vec!["place", "the", "in", "left", "of", "front"];
    words.extend(Color::ALL.iter().map(|c| c.name()));
    words.extend(Shape::ALL.iter().map(|s| s.name()));
    words
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "place the {} {} {} the {} {}",
            self.pick.color.name(),
            self.pick.shape.name(),
            self.relation.phrase(),
            self.target.color.name(),
            self.target.shape.name()
        )
    }
}

fn parse_color(w: &str) -> Option<Color> {
    Color::ALL.into_iter().find(|c| c.name() == w)
}

fn parse_shape(w: &str) -> Option<Shape> {
    Shape::ALL.into_iter().find(|s| s.name() == w)
}

impl Instruction {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Instruction(text.to_string());
        let words: Vec<&str> = text.split_whitespace().collect();
        let object = |c: &str, s: &str| -> Option<ObjectRef> {
            Some(ObjectRef {
                color: parse_color(c)?,
                shape: parse_shape(s)?,
            })
        };
        if words.len() < 7 || words[0] != "place" || words[1] != "the" {
            return Err(bad());
        }
        let pick = object(words[2], words[3]).ok_or_else(bad)?;
        let (relation, rest) = match &words[4..] {
            ["in", "the", rest @ ..] => (Relation::In, rest),
            ["left", "of", "the", rest @ ..] => (Relation::LeftOf, rest),
            ["in", "front", "of", "the", rest @ ..] => (Relation::FrontOf, rest),
            _ => return Err(bad()),
        };
        let target = match rest {
            [c, s] => object(c, s).ok_or_else(bad)?,
            _ => return Err(bad()),
        };
        if !pick.shape.graspable() || (relation == Relation::In && !target.shape.container()) {
            return Err(bad());
        }
        Ok(Self { pick, relation, target })
    }

    pub fn words(&self) -> Vec<String> {
        self.to_string().split_whitespace().map(str::to_string).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_relations() {
        for relation in Relation::ALL {
            let ins = Instruction {
                pick: ObjectRef { color: Color::Red, shape: Shape::Cube },
                relation,
                target: ObjectRef { color: Color::Brown, shape: Shape::Bag },
            };
            assert_eq!(Instruction::parse(&ins.to_string()).unwrap(), ins);
        }
        assert_eq!(
            Instruction::parse("place the red cube in the brown bag").unwrap().relation,
            Relation::In
        );
    }

    #[test]
    fn rejects_ungrammatical() {
        for s in [
            "",
            "place the red cube",
            "place the red cube on the blue bowl",
            "place the red cube in the blue ball",
            "place the red bowl left of the blue ball",
            "place the pink cube in the blue bowl",
            "place the red cube in the blue bowl now",
        ] {
            assert!(Instruction::parse(s).is_err(), "{s}");
        }
    }

    #[test]
    fn words_are_in_grammar() {
        let vocab = grammar_words();
        let ins = Instruction::parse("place the white ball in front of the purple cube").unwrap();
        assert!(ins.words().iter().all(|w| vocab.contains(&w.as_str())));
    }
}
