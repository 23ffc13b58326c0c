//! Stage instructions are text assets under `prompts/`, compiled in as
//! defaults and overridable from a directory of `<name>.txt` files.

use std::fs;
use std::path::Path;

use serde::Serialize;

pub const PROMPT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Prompt {
    pub name: &'static str,
    pub version: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub segmentation: Prompt,
    pub pairs: Prompt,
    pub relations: Prompt,
    pub refinement: Prompt,
    pub direct: Prompt,
    pub zero_shot: Prompt,
}

fn builtin(name: &'static str, text: &str) -> Prompt {
    Prompt {
        name,
        version: PROMPT_VERSION.to_string(),
        text: text.trim_end().to_string(),
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            segmentation: builtin("segmentation", include_str!("../../prompts/segmentation.txt")),
            pairs: builtin("pairs", include_str!("../../prompts/pairs.txt")),
            relations: builtin("relations", include_str!("../../prompts/relations.txt")),
            refinement: builtin("refinement", include_str!("../../prompts/refinement.txt")),
            direct: builtin("direct", include_str!("../../prompts/direct.txt")),
            zero_shot: builtin("zero_shot", include_str!("../../prompts/zero_shot.txt")),
        }
    }
}

impl PromptSet {
    /// Defaults with any `<name>.txt` found in `dir` substituted. The version
    /// of an overridden prompt becomes `file`.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = PromptSet::default();
        for p in [
            &mut set.segmentation,
            &mut set.pairs,
            &mut set.relations,
            &mut set.refinement,
            &mut set.direct,
            &mut set.zero_shot,
        ] {
            let file = dir.join(format!("{}.txt", p.name));
            if file.exists() {
                p.text = fs::read_to_string(&file)?.trim_end().to_string();
                p.version = "file".to_string();
            }
        }
        Ok(set)
    }
}
