use std::ffi::CString;
use std::sync::Once;

use pyo3::prelude::*;

static INIT: Once = Once::new();

fn run(code: &str) {
    INIT.call_once(|| {
        use pytilt::pytilt;
        pyo3::append_to_inittab!(pytilt);
        Python::initialize();
    });
    let code = CString::new(code).unwrap();
    Python::attach(|py| {
        if let Err(e) = py.run(&code, None, None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn metrics_and_buckets() {
    run(r#"
import pytilt
assert pytilt.levenshtein("kitten", "sitting") == 3
assert pytilt.exact_match(" Total ", "total")
assert pytilt.anls("1O", ["10"]) == 0.5
assert pytilt.bucket_1d(0) == 0
assert pytilt.bucket_1d(-1) != pytilt.bucket_1d(1)
assert [p[0] for p in pytilt.presets()][0] == "sroie-like"
assert pytilt.presets()[0][4] == "constant"
"#);
}

#[test]
fn documents_round_trip_and_corrupt() {
    run(r#"
import pytilt
d = pytilt.synth_document("layout_qa", 3, items=2)
assert len(d.questions) == 2
assert len(d.words) == len(d.boxes) > 0
e = pytilt.Document.from_json(d.to_json())
assert e.words == d.words and e.id == d.id
src, tgt, restored = pytilt.span_corruption(d, seed=1)
assert restored == " ".join(d.words)
try:
    pytilt.synth_document("poetry", 0)
    raise AssertionError("unknown kind accepted")
except ValueError:
    pass
"#);
}

#[test]
fn model_generates_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    run(&format!(
        r#"
import json, pytilt
cfg = json.dumps({{"d_model": 16, "num_heads": 2, "d_ff": 24, "enc_layers": 1, "dec_layers": 1,
    "vision": {{"input_w": 32, "input_h": 24, "channels": [2, 3, 3], "out_stage": 2, "out_channels": 4}}}})
m = pytilt.Model(cfg, seed=5)
assert m.num_parameters > 0
d = pytilt.synth_document("font_cue", 1, items=3)
prompt = d.questions[0][0]
a = m.generate(d, prompt, max_len=4)
assert isinstance(a, str) and len(a.encode()) <= 4
assert m.loss(d, prompt, "x") > 0
m.save({path:?})
n = pytilt.Model.load({path:?})
assert n.generate(d, prompt, max_len=4) == a
assert json.loads(n.config) == json.loads(m.config)
assert 0.0 <= m.evaluate([d], metric="accuracy", max_len=4) <= 1.0
"#,
        path = path.to_str().unwrap()
    ));
}
