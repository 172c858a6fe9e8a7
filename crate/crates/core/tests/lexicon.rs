use std::path::Path;

use gozone_core::phasetool::{Lexicon, BUNDLED_LEXICON, TURN2_TEMPLATE};
use gozone_core::SurgicalPhase;
use sha2::{Digest, Sha256};

const LEXICON_SHA256: &str = "98f3ac287b8f1edc314dedcfc5e590a11d7ee40f7ca96e22155cd6605fd97fc9";

#[test]
fn lexicon_file_checksum() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/phase_definitions.tsv");
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(format!("{:x}", Sha256::digest(&bytes)), LEXICON_SHA256);
    assert_eq!(bytes, BUNDLED_LEXICON.as_bytes());
}

#[test]
fn lexicon_texts_are_exact() {
    let lex = Lexicon::bundled();
    let expected = [
        "Target the Calot's triangle area. The Go Zone is defined as the peritoneum overlying the cystic duct and artery junction, where the initial dissection must commence to expose the underlying structures.",
        "Target the ``Safety Window.'' The Go Zone is strictly limited to the fibro-fatty tissue within the triangle. It explicitly excludes the liver bed (cystic plate) and the common bile duct (CBD) to prevent bile duct injury.",
        "Target the skeletonized cystic duct and artery. The Go Zone is the specific segment of these structures that is free of surrounding tissue and distinct from the CBD, rendering it suitable for safe clip application.",
        "Target the connective tissue plane (areolar tissue). The Go Zone is identified as the white or translucent line of adhesion separating the gallbladder from the liver bed.",
    ];
    for (phase, text) in SurgicalPhase::ALL.iter().zip(expected) {
        assert_eq!(lex.lookup(*phase).definition_text, text);
    }
}

#[test]
fn template_is_exact() {
    let expected = "### Surgical Context\n**Identified Phase**: {phase_name} ({choice_letter})\n**Definition**: {definition}\n\n### Mission\nLocate the \"Go Zone\" strictly based on the **Definition** above.\n\n### Required Output Format\n<thinking>\nBriefly map the visual landmarks (e.g., liver edge, duct, instrument) to the text definition above.\n</thinking>\n\n<reasoning>\n1. Location: (Anatomical location description of the Go Zone)\n2. Exposure: (Is retraction sufficient?)\n3. Next Action: (Immediate maneuver)\n4. Critical Risk: (Primary risk of error)\n</reasoning>\n\n<answer>\n[xmin, ymin, xmax, ymax]\n</answer>";
    assert_eq!(TURN2_TEMPLATE, expected);
}
