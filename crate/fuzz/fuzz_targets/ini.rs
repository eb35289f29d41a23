#![no_main]

use libfuzzer_sys::fuzz_target;
use usdeconv::cli::RunConfig;
use usdeconv::io::ini::Ini;
use usdeconv::phantom::PhantomSpec;
use usdeconv::psf::PsfParams;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ini) = Ini::parse(text) {
        // the writer's output must parse back to the same sections
        assert_eq!(Ini::parse(&ini.to_string()).expect("printed INI parses").sections.len(), ini.sections.len());
    }
    if let Ok(spec) = PhantomSpec::from_ini(text) {
        assert_eq!(PhantomSpec::from_ini(&spec.to_ini()).expect("spec round trip"), spec);
    }
    if let Ok(psf) = PsfParams::from_ini(text) {
        assert_eq!(PsfParams::from_ini(&psf.to_ini()).expect("psf round trip"), psf);
    }
    let _ = RunConfig::from_ini(text);
});
