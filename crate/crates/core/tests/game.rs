use std::path::PathBuf;

use persona_games::game::{assemble_prompt, render_study_prompt, GroundingPlacement, GROUNDING_QUESTION};
use persona_games::model::{Framing, GameSpec, Party};

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn templates_match_golden_files() {
    for framing in Framing::ALL {
        for party in Party::BOTH {
            let file = format!("{}_{}.txt", framing.as_str().to_lowercase(), party.label().to_lowercase());
            let rendered = render_study_prompt(&GameSpec::for_study(framing), party).unwrap();
            assert_eq!(rendered, golden(&file), "{file}");
        }
    }
}

#[test]
fn partner_placeholders() {
    let wd = render_study_prompt(&GameSpec::for_study(Framing::WD), Party::Republican).unwrap();
    assert!(wd.ends_with("How much money do you want to send to REPUBLICAN?"));
    let wt = render_study_prompt(&GameSpec::for_study(Framing::WT), Party::Democrat).unwrap();
    assert!(wt.ends_with("How much money do you want to send to DEMOCRAT?"));
    assert!(wt.contains("multiplied by 3 and then given to the other person"));
    let ct = render_study_prompt(&GameSpec::for_study(Framing::CT), Party::Democrat).unwrap();
    assert!(ct.contains("Player 2 identifies politically with the Democratic Party"));
    let id = render_study_prompt(&GameSpec::for_study(Framing::ID), Party::Democrat).unwrap();
    assert!(id.contains("This game is played by pairs of individuals"));
    assert!(id.contains("- Political party: Democrat"));
}

#[test]
fn grounding_precedes_instructions() {
    let study = render_study_prompt(&GameSpec::for_study(Framing::CT), Party::Republican).unwrap();
    let prompt = assemble_prompt("I am a Republican.", Some(2015), GroundingPlacement::AfterContext, &study);
    let ctx = prompt.find("I am a Republican.").unwrap();
    let year = prompt.find(GROUNDING_QUESTION).unwrap();
    let body = prompt.find("In this game, there are two players").unwrap();
    assert!(ctx < year && year < body);
    assert!(prompt.contains("Me: 2015"));
}
