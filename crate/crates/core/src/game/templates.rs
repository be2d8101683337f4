//! Study instructions for the four source experiments.
//!
//! Each template is reproduced as it reads when typeset: paragraph breaks
//! become blank lines, bold is dropped, and list items get plain-text
//! markers. The endowment and multiplier come from the [`GameSpec`]; with
//! the published defaults ($10, ×3) the output matches the original wording.

use crate::model::{Framing, GameSpec, Party};

/// Renders an amount of money, dropping cents when whole.
fn dollars(cents: u64) -> String {
    if cents.is_multiple_of(100) {
        format!("${}", cents / 100)
    } else {
        format!("${}.{:02}", cents / 100, cents % 100)
    }
}

fn plural(n: u64, one: &str, many: &str) -> String {
    format!("{n} {}", if n == 1 { one } else { many })
}

pub(super) fn render(spec: &GameSpec, partner: Party) -> String {
    match spec.framing {
        Framing::ID => iyengar_dictator(spec, partner),
        Framing::WD => whitt_dictator(spec, partner),
        Framing::CT => carlin_trust(spec, partner),
        Framing::WT => whitt_trust(spec, partner),
    }
}

fn iyengar_dictator(spec: &GameSpec, partner: Party) -> String {
    let pot = dollars(u64::from(spec.endowment) * 100);
    let party = partner.label();
    format!(
        "Question: This game is played by pairs of individuals. Each pair is made up of a Player 1 and a Player 2. \
Each player will have some information about the other player, but you will not be told who the other players are \
during or after the experiment.

The game is conducted as follows: A sum of {pot} will be provisionally allocated to Player 1 at the start of each \
round. Player 1 will then decide how much of the {pot} to offer to player 2. Player 1 could give some, all, or none \
of the {pot}. Player 1 keeps all money not given to player 2. Player 2 gets to keep all the money Player 1 offers.

The computer has randomly assigned you to play as Player 1. You will play this game once with another person. \
The more money you obtain, the more successful you will be.

You are Player 1. You have {pot}. You can split the money between yourself and Player 2 in any way you want.

Information about the Player 2

- Political party: {party}

So put the dollars you wish to go to Player 2."
    )
}

fn whitt_dictator(spec: &GameSpec, partner: Party) -> String {
    let pot = dollars(u64::from(spec.endowment) * 100);
    let party = partner.label();
    let shout = party.to_uppercase();
    format!(
        "Question: In this task you have {pot}. You must decide how much to keep for yourself and how much to give \
to another person. In this task, the only information we can give you is that the other person identifies \
politically as a {party}. Whatever you send to the other person will be given to them if they are selected to \
receive a payment. Whatever you keep for yourself will be paid to you if you are selected to receive a payment. \
Please make your decision.

How much money do you want to send to {shout}?"
    )
}

fn carlin_trust(spec: &GameSpec, partner: Party) -> String {
    let endowment = u64::from(spec.endowment);
    let k = u64::from(spec.multiplier);
    let tickets = plural(endowment, "raffle ticket", "raffle tickets");
    let party = match partner {
        Party::Democrat => "Democratic",
        Party::Republican => "Republican",
    };
    let small = 1.min(endowment);
    let large = 5.min(endowment);
    let example_small = format!(
        "If you send {}, Player 2 receives {}.",
        plural(small, "ticket", "tickets"),
        plural(small * k, "ticket", "tickets")
    );
    let example_large = format!(
        "If you send {}, Player 2 receives {}.",
        plural(large, "ticket", "tickets"),
        plural(large * k, "ticket", "tickets")
    );
    format!(
        "Question: In this game, there are two players: \u{201c}Player 1\u{201d} and \u{201c}Player 2.\u{201d} \
You are Player 1.

Player 2, like you, received {tickets} to participate in the study. You will not be told who this person is \
either during or after the survey (nor will that person be told who you are). We have chosen to give you one piece \
of information about Player 2:

Player 2 identifies politically with the {party} Party.

Today, you will have the opportunity to send some, all, or none of {tickets} to Player 2. This person will then \
keep the tickets sent to them, if any, and you keep the remainder.

The game is as follows:
1.) You must decide how many raffle tickets (if any) you will send to Player 2. Any amount you keep for yourself \
will be given to you.
2.) Whatever amount you send to Player 2 will be tripled before it is passed on to Player 2. Player 2 then has the \
option of returning any portion of this tripled amount to you. Then the game is over.

For example:
(a) {example_small}
(b) {example_large}

These are examples only. To review, any number of tickets you send will be tripled and given to Player 2. This \
person will keep the tickets you send them, minus the number of tickets they return to you. Your payoff in this \
game is the number of tickets that you kept for yourself, plus any tickets Player 2 returned to you. Once you \
understand this game, and are ready to make a decision, select the amount from the options below."
    )
}

fn whitt_trust(spec: &GameSpec, partner: Party) -> String {
    let cents = u64::from(spec.endowment) * 100;
    let k = u64::from(spec.multiplier);
    let pot = dollars(cents);
    let grown = dollars(cents * k);
    let half = dollars(cents * k / 2);
    let zero = dollars(0);
    let party = partner.label();
    let shout = party.to_uppercase();
    format!(
        "Question: In this task you have {pot}. You must decide how much to keep for yourself and how much to give \
to another person. The only information we can give you is that the other person identifies politically as a \
{party}.

Whatever you keep for yourself will be paid to you if you are selected to receive a payment. Whatever you send to \
the other person will be multiplied by {k} and then given to the other person. The other person then has the \
option to give money back to you.

For example:
- If you keep {pot}, then the other person receives {zero}.
- If you send {pot}, then we multiply that sum by {k} ({pot} \u{d7} {k} = {grown}) and the other person receives \
{grown}.
- The other person then decides how much (if any) of the {grown} to give back to you.
  - If the person keeps all {grown}, then you receive {zero}.
  - If the person returns half, then you and the other person receive {half} each.

How much money do you want to send to {shout}?"
    )
}
