use lkdn::config::{RunConfig, TrainData};
use lkdn::error::CliError;
use lkdn_core::optim::{LossKind, OptimizerKind};
use lkdn_core::RefinementVariant;

#[test]
fn recipe_lkdn_s_has_two_stages() {
    let run = RunConfig::parse("preset = lkdn-s\nrecipe = lkdn-s\ntrain_dir = data/DIV2K # HR only\n").unwrap();
    assert_eq!(run.model.scale, 4);
    assert_eq!(run.model.refinement_variant, RefinementVariant::Rbsb);
    assert_eq!(run.stages.len(), 2);
    assert_eq!((run.stages[0].batch_size, run.stages[0].lr_patch), (128, 64));
    assert_eq!((run.stages[1].batch_size, run.stages[1].lr_patch), (64, 120));
    assert_eq!(run.stages[1].stage.loss, LossKind::L2);
    assert_eq!(run.total_steps(), 1_000_000);
    assert_eq!(run.stage_at(949_999).unwrap().stage.lr, 5e-3);
    assert_eq!(run.stage_at(950_000).unwrap().stage.lr, 2e-5);
    assert!(run.stage_at(1_000_000).is_err());
    assert_eq!(run.data, TrainData::Directory("data/DIV2K".into()));
    assert_eq!((run.optimizer, run.seed, run.eval_every), (OptimizerKind::Adan, 0, 5000));
}

#[test]
fn overrides_collapse_to_one_stage() {
    let run = RunConfig::parse(
        "preset = tiny\nscale = 2\nrecipe = lkdn\nsteps = 10\nloss = l2\nsynthetic = 3\noptimizer = adam\n",
    )
    .unwrap();
    assert_eq!(run.stages.len(), 1);
    assert_eq!(run.stages[0].stage.steps, 10);
    assert_eq!(run.stages[0].stage.loss, LossKind::L2);
    assert_eq!(run.stages[0].batch_size, 64);
    assert_eq!(run.optimizer, OptimizerKind::Adam);
    assert_eq!(run.data, TrainData::Synthetic { count: 3, size: 128 });
}

#[test]
fn bad_configs_are_user_errors() {
    let cases = [
        "synthetic = 2\nbogus = 1\n",
        "train_dir = a\nsynthetic = 2\n",
        "preset = tiny\n",
        "synthetic = 2\nscale = 5\n",
        "synthetic = 2\nrecipe = fast\n",
        "synthetic = 2\nlr = -1\n",
        "synthetic = 2\nsteps = many\n",
        "synthetic = 2\nno equals sign\n",
        "synthetic = 2\nchannels = 7\n",
    ];
    for text in cases {
        let err = RunConfig::parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{text:?} gave {err}");
    }
}

#[test]
fn load_reports_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "synthetic = 2\nwat = 1\n").unwrap();
    match RunConfig::load(&path).unwrap_err() {
        CliError::Format { path: p, message } => {
            assert_eq!(p, path);
            assert!(message.contains("wat"));
        }
        other => panic!("unexpected {other:?}"),
    }
}
