//! Checked-in scenario bundles must match their generators. Set
//! `DPD_REGENERATE_FIXTURES=1` to rewrite them.

use std::path::PathBuf;

use dpd_core::scenario::{self, BUNDLED};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn fixtures_match_generators() {
    let regenerate = std::env::var("DPD_REGENERATE_FIXTURES").is_ok_and(|v| v == "1");
    for name in BUNDLED {
        let (s, tables) = scenario::generate(name).unwrap();
        let dir = root().join(name);
        if regenerate {
            scenario::write_bundle(&dir, &s, &tables).unwrap();
        }
        let (on_disk, ts) = scenario::read_bundle(&dir).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(on_disk, s, "{name}: scenario.json drifted");
        for (rel, t) in &tables {
            assert_eq!(ts.peek(rel).unwrap(), t, "{name}: {rel} drifted");
        }
    }
}

#[test]
fn fixtures_load_and_instantiate() {
    for name in BUNDLED {
        let (s, env) = scenario::load(root().join(name).to_str().unwrap(), None).unwrap();
        assert_eq!(s.name, name);
        for q in &s.queries {
            let role = s.users.iter().find(|u| u.name == q.user).unwrap().role.clone();
            dpd_core::workflow::analyze(&env.catalog, Some(&env.tables), &q.sql, &q.user, &role).unwrap();
        }
    }
}
