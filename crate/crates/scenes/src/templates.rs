//! Caption templates. The caption is a pure function of (scenario,
//! object_attrs): same inputs, same four clauses, always. That guarantee is
//! what makes caption learning measurable with exact-match accuracy.

use crate::types::{Category, ColBand, ObjectAttrs, RowBand, Scenario};

fn scenario_clause(s: Scenario) -> &'static str {
    match s {
        Scenario::Urban => "the ego car drives along a conventional urban road .",
        Scenario::Narrow => "the ego car moves down a narrow road between close walls .",
        Scenario::Intersection => "the ego car approaches a busy intersection with crossing traffic .",
    }
}

fn object_clause(a: ObjectAttrs) -> String {
    format!(
        "the highest risk object is a {} {} in the {} {} region .",
        a.color.as_str(),
        a.category.as_str(),
        a.row.as_str(),
        a.col.as_str()
    )
}

fn intention_clause(s: Scenario, row: RowBand) -> &'static str {
    match (s, row) {
        (Scenario::Urban, RowBand::Near) => "the ego car intends to brake smoothly and hold its lane .",
        (Scenario::Urban, RowBand::Middle) => "the ego car intends to ease off and monitor the lane ahead .",
        (Scenario::Urban, RowBand::Far) => "the ego car intends to maintain speed with steady caution .",
        (Scenario::Narrow, RowBand::Near) => "the ego car intends to stop and wait for clear space .",
        (Scenario::Narrow, RowBand::Middle) => "the ego car intends to crawl forward with extra care .",
        (Scenario::Narrow, RowBand::Far) => "the ego car intends to proceed slowly along the lane .",
        (Scenario::Intersection, RowBand::Near) => "the ego car intends to yield before entering the junction .",
        (Scenario::Intersection, RowBand::Middle) => "the ego car intends to cover the brake across the junction .",
        (Scenario::Intersection, RowBand::Far) => "the ego car intends to scan the crossing before moving on .",
    }
}

fn suggestion_clause(category: Category, col: ColBand) -> String {
    let c = category.as_str();
    match col {
        ColBand::Left => format!("the driver should keep right and give the {c} more room ."),
        ColBand::Center => format!("the driver should hold back until the {c} clears the path ."),
        ColBand::Right => format!("the driver should keep left and pass the {c} with care ."),
    }
}

/// The four ordered caption clauses for a scene.
pub fn caption_for(scenario: Scenario, attrs: ObjectAttrs) -> [String; 4] {
    [
        scenario_clause(scenario).to_string(),
        object_clause(attrs),
        intention_clause(scenario, attrs.row).to_string(),
        suggestion_clause(attrs.category, attrs.col),
    ]
}

/// Every word the templates can emit, deduplicated and sorted. Useful for
/// bounding tokenizer vocabularies and asserting the vocab budget.
pub fn template_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for s in Scenario::ALL {
        for category in Category::ALL {
            for color in crate::types::ObjectColor::ALL {
                for row in [RowBand::Far, RowBand::Middle, RowBand::Near] {
                    for col in [ColBand::Left, ColBand::Center, ColBand::Right] {
                        let attrs = ObjectAttrs {
                            category,
                            color,
                            row,
                            col,
                        };
                        for clause in caption_for(s, attrs) {
                            for w in clause.split_whitespace() {
                                if !words.iter().any(|x| x == w) {
                                    words.push(w.to_string());
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    words.sort();
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ObjectColor;

    #[test]
    fn caption_is_pure_function_of_attrs() {
        let attrs = ObjectAttrs {
            category: Category::Cyclist,
            color: ObjectColor::Orange,
            row: RowBand::Near,
            col: ColBand::Right,
        };
        let a = caption_for(Scenario::Narrow, attrs);
        let b = caption_for(Scenario::Narrow, attrs);
        assert_eq!(a, b);
        assert!(a.iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn clauses_mention_their_attributes() {
        let attrs = ObjectAttrs {
            category: Category::Truck,
            color: ObjectColor::Cyan,
            row: RowBand::Far,
            col: ColBand::Left,
        };
        let c = caption_for(Scenario::Urban, attrs);
        assert!(c[0].contains("urban"));
        assert!(c[1].contains("cyan") && c[1].contains("truck"));
        assert!(c[1].contains("far") && c[1].contains("left"));
        assert!(c[3].contains("truck"));
    }

    #[test]
    fn vocabulary_stays_inside_budget() {
        let v = template_vocabulary();
        assert!(!v.is_empty());
        assert!(v.len() <= 120, "template vocabulary is {} words", v.len());
    }
}
