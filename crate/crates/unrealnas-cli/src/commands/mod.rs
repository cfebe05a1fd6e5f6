pub mod analyze;
pub mod gen;
pub mod retrain;
pub mod search;

use crate::args::{AnalyzeCmd, Cli, Command, GenKind};
use crate::CliError;

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { kind } => match kind {
            GenKind::Rlrd(a) => gen::rlrd(a),
            GenKind::Rlgd(a) => gen::rlgd(a),
            GenKind::Rlrn(a) => gen::rlrn(a),
            GenKind::Real(a) => gen::real(a),
        },
        Command::Search(a) => search::run(a),
        Command::Retrain(a) => retrain::run(a),
        Command::Analyze { what } => match what {
            AnalyzeCmd::Difficulty(a) => analyze::difficulty(a),
            AnalyzeCmd::Distinguish(a) => analyze::distinguish(a),
            AnalyzeCmd::AblateClasses(a) => analyze::ablate_classes(a),
            AnalyzeCmd::SkipDynamics(a) => analyze::skip_dynamics(a),
            AnalyzeCmd::Silhouette(a) => analyze::silhouette(a),
        },
    }
}
