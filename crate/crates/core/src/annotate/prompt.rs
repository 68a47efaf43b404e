//! Prompt templates for the annotation interactions.
//!
//! Templates are kept verbatim, including their original spelling and
//! punctuation. Slots are `{labels}`, `{orig_lang}`, `{filtered_lang}`,
//! `{prompt}` and `{PRIMITIVES}`; list values are rendered the way a Python
//! f-string renders a list of strings, e.g. `['Go forward', 'Turn left']`.

use crate::error::{Error, Result};
use crate::model::AtomicLabel;

use super::{AnnotationKind, AnnotatorRequest};

pub const PLAN_TEMPLATE: &str = r##"A robot is moving through an environment and has the task '{prompt}'. Given the current observation, which action in the list {PRIMITIVES} should the robot take next? Return your response as the single action in the list of primitives with no additional information."##;

pub const SYSTEM_TEMPLATE: &str = r##"A small mobile robot is moving through an environment and observes this environment with a fisheye camera. You will be provided a series of images observed by the robot. Your task is to describe the trajectory of the robot in the environment based on these images. You will be asked to describe the robot movement in the environment and provide reasoning for your descriptions. Are you ready to start?"##;

pub const DESCRIBE_TEMPLATE: &str = r##"Describe the provided image, noting any objects, structures, people, or other factors that might help the robot localize. Be specific about which objects are close to the robot, which are far and on which side of the field of view they are located."##;

pub const SUMMARIZE_TEMPLATE: &str = r##"Here is a list of descriptions of sequential images observed by the robot. Describe the trajectory of the robot in the environment based on these descriptions. Return the description in the form of a json object with the following keys: 'instructions' and 'reasoning'. The 'instructions' key should contain a list of possible instructions that describe the trajectory in the following formats: 1) 'Move from A to B' or 'Move to B' where A and B are landmarks or structures in the environment. 2) 'Move away from C' where C is a landmark or structure in the environment. 3) 'Move past D' where D is a landmark or structure in the environment. 4) 'Move in a E way' where E captures the manner of movement of the behavior of the robot."##;

pub const FILTER_TEMPLATE: &str = r##"The image is the trajectory a robot took projected onto its initial observation. The actions based only on the robot odometry are {labels} and therefore will not provide information on the environment. The original instructions proposed to correspond to the trajectory based only on the robot observations are {orig_lang} and therefore will not have information grounded in the actual odometry of the robot except for what can be deduced from images. Which of the noisy original instructions makes the most sense given the actions and the observation? Additionally, provide a simple new language instruction that makes sense given the provided information. Format the response as a json with the keys 'best' and 'new'. The best field should contain a list of strings that correspond to the best original instructions. The new field should contain a list that corresponds to new instructions."##;

pub const COUNTERFACTUAL_TEMPLATE: &str = r##"A robot is moving through an environment and has performed a certain trajectory. The trajectory can be described by the sequence of low level actions taken by the robot are {labels} and the high level instructions that have been proposed to be associated with the trajectory are {filtered_lang}. The provided images are the first person image observations taken by the robot at the beginning on each low level action. Given this information, propose a different trajectory the robot could have taken to interact with the environment in a different way. First, observation what objects and structures are present and their locations relative to the robot in the scene. For example, is the robot is in a hall, it can travel along the walls or in the center, so you may note if there are walls and on which sides of the robot. Another example is that the robot could move to a specifc object in the scene, and therefore note where different objects are relative to the robot. Enumerate several different alternatives. Only propose short horizon alternatives and provide specific information about the task. Give the previous low level action and its index in the low level actions list from which the trajectory should take an alternative path and then low level action, from the list: ['Turn left', 'Turn right', 'Go forward', 'Stop', 'Adjust left', 'Adjust right'] which performs the alternative path. Your output should be in the form of json objects \ which is a list of objects each with a field for the trajectory and a field for reasoning. For example, if the input low level actions are ['Go forward', 'Go forward', 'Turn left'], the original instruction was 'Move towards the door on the left' then a potential output could be : '['prev_action' : ['Go forward', 1], 'proposed_action' : 'Turn right', 'new_instruction' : ' Move away from the door on the left' 'reasoning': 'The robot could try instead moving away from the door on the left to explore the room further. This would be a good alternative to the original instruction.'"##;

/// Renders a string the way Python's `repr` does for plain text.
pub fn python_str(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Renders a list of strings the way Python's `repr` does.
pub fn python_list<S: AsRef<str>>(items: &[S]) -> String {
    let parts: Vec<String> = items.iter().map(|s| python_str(s.as_ref())).collect();
    format!("[{}]", parts.join(", "))
}

pub fn label_list(labels: &[AtomicLabel]) -> String {
    let names: Vec<&str> = labels.iter().map(AtomicLabel::prompt_name).collect();
    python_list(&names)
}

/// The primitive list offered to the high-level planner.
pub fn primitives() -> String {
    label_list(&AtomicLabel::ALL)
}

pub fn template(kind: AnnotationKind) -> &'static str {
    match kind {
        AnnotationKind::Describe => DESCRIBE_TEMPLATE,
        AnnotationKind::Summarize => SUMMARIZE_TEMPLATE,
        AnnotationKind::Filter => FILTER_TEMPLATE,
        AnnotationKind::Counterfactual => COUNTERFACTUAL_TEMPLATE,
        AnnotationKind::Plan => PLAN_TEMPLATE,
    }
}

/// Instantiates the template for `req.kind`, checking that every field the
/// kind requires is present.
pub fn render_prompt(req: &AnnotatorRequest) -> Result<String> {
    let ctx = &req.context;
    let labels = || ctx.labels.as_deref().ok_or(Error::MissingField("labels"));
    Ok(match req.kind {
        AnnotationKind::Describe => {
            if req.images.is_empty() {
                return Err(Error::MissingField("images"));
            }
            DESCRIBE_TEMPLATE.to_string()
        }
        AnnotationKind::Summarize => {
            if ctx.descriptions.as_ref().is_none_or(Vec::is_empty) {
                return Err(Error::MissingField("descriptions"));
            }
            SUMMARIZE_TEMPLATE.to_string()
        }
        AnnotationKind::Filter => {
            let labels = labels()?;
            let orig = ctx
                .orig_lang
                .as_deref()
                .ok_or(Error::MissingField("orig_lang"))?;
            FILTER_TEMPLATE
                .replace("{labels}", &label_list(labels))
                .replace("{orig_lang}", &python_list(orig))
        }
        AnnotationKind::Counterfactual => {
            let labels = labels()?;
            let filtered = ctx
                .filtered_lang
                .as_deref()
                .ok_or(Error::MissingField("filtered_lang"))?;
            COUNTERFACTUAL_TEMPLATE
                .replace("{labels}", &label_list(labels))
                .replace("{filtered_lang}", &python_list(filtered))
        }
        AnnotationKind::Plan => {
            let prompt = ctx.prompt.as_deref().ok_or(Error::MissingField("prompt"))?;
            PLAN_TEMPLATE
                .replace("{prompt}", prompt)
                .replace("{PRIMITIVES}", &primitives())
        }
    })
}

/// Text listing the per-image descriptions that accompanies a summarize prompt.
pub fn descriptions_block(descriptions: &[String]) -> String {
    descriptions
        .iter()
        .enumerate()
        .map(|(i, d)| format!("Image {}: {}", i + 1, d))
        .collect::<Vec<_>>()
        .join("\n")
}
