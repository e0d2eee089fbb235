//! Fixed label universes: 16 dialog acts and 8 caller intents.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-utterance communicative function. Declaration order is the canonical
/// label order used wherever acts are serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogAct {
    YesResponse,
    Greeting,
    Response,
    DataConfirmation,
    ProcedureExplanation,
    DataQuestion,
    Closing,
    DataCommunication,
    BearWithMe,
    Acknowledgement,
    DataResponse,
    FillerDisfluency,
    Thanks,
    OpenQuestion,
    ProblemDescription,
    Other,
}

impl DialogAct {
    pub const ALL: [DialogAct; 16] = [
        DialogAct::YesResponse,
        DialogAct::Greeting,
        DialogAct::Response,
        DialogAct::DataConfirmation,
        DialogAct::ProcedureExplanation,
        DialogAct::DataQuestion,
        DialogAct::Closing,
        DialogAct::DataCommunication,
        DialogAct::BearWithMe,
        DialogAct::Acknowledgement,
        DialogAct::DataResponse,
        DialogAct::FillerDisfluency,
        DialogAct::Thanks,
        DialogAct::OpenQuestion,
        DialogAct::ProblemDescription,
        DialogAct::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DialogAct::YesResponse => "yes_response",
            DialogAct::Greeting => "greeting",
            DialogAct::Response => "response",
            DialogAct::DataConfirmation => "data_confirmation",
            DialogAct::ProcedureExplanation => "procedure_explanation",
            DialogAct::DataQuestion => "data_question",
            DialogAct::Closing => "closing",
            DialogAct::DataCommunication => "data_communication",
            DialogAct::BearWithMe => "bear_with_me",
            DialogAct::Acknowledgement => "acknowledgement",
            DialogAct::DataResponse => "data_response",
            DialogAct::FillerDisfluency => "filler_disfluency",
            DialogAct::Thanks => "thanks",
            DialogAct::OpenQuestion => "open_question",
            DialogAct::ProblemDescription => "problem_description",
            DialogAct::Other => "other",
        }
    }

    /// Special token used both by the context encoder and the transducer.
    pub fn token(self) -> String {
        format!("<act:{}>", self.name())
    }
}

impl fmt::Display for DialogAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DialogAct {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dialog act `{s}`")))
    }
}

/// Conversation-level caller goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    OrderChecks,
    CheckBalance,
    ReplaceCard,
    ResetPassword,
    GetBranchHours,
    PayBill,
    ScheduleAppointment,
    TransferMoney,
}

impl Intent {
    pub const ALL: [Intent; 8] = [
        Intent::OrderChecks,
        Intent::CheckBalance,
        Intent::ReplaceCard,
        Intent::ResetPassword,
        Intent::GetBranchHours,
        Intent::PayBill,
        Intent::ScheduleAppointment,
        Intent::TransferMoney,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Intent::OrderChecks => "order_checks",
            Intent::CheckBalance => "check_balance",
            Intent::ReplaceCard => "replace_card",
            Intent::ResetPassword => "reset_password",
            Intent::GetBranchHours => "get_branch_hours",
            Intent::PayBill => "pay_bill",
            Intent::ScheduleAppointment => "schedule_appointment",
            Intent::TransferMoney => "transfer_money",
        }
    }

    pub fn token(self) -> String {
        format!("<int:{}>", self.name())
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Intent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown intent `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn universes_have_expected_sizes() {
        assert_eq!(DialogAct::ALL.len(), 16);
        assert_eq!(Intent::ALL.len(), 8);
        for (i, a) in DialogAct::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(a.name().parse::<DialogAct>().unwrap(), *a);
        }
        for (i, x) in Intent::ALL.iter().enumerate() {
            assert_eq!(x.index(), i);
            assert_eq!(x.name().parse::<Intent>().unwrap(), *x);
        }
    }

    #[test]
    fn tokens_are_distinct() {
        let mut toks: Vec<String> = DialogAct::ALL.iter().map(|a| a.token()).collect();
        toks.extend(Intent::ALL.iter().map(|i| i.token()));
        let n = toks.len();
        toks.sort();
        toks.dedup();
        assert_eq!(toks.len(), n);
    }
}
